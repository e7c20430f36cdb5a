"""Write float32 density maps whose integrals round to the reference
predicted counts 423.16, 286.89 and 288.69 at two decimals.

    python tools/build_count_fixture.py tests/fixtures/count_maps.csa
"""

import sys

import numpy as np

sys.path.insert(0, "src")
from crowdlab.checkpoint import CheckpointArchive, write_checkpoint  # noqa: E402

TARGETS = {"image1": (427, 423.16), "image2": (240, 286.89), "image3": (320, 288.69)}


def build(seed=7, shape=(48, 64)):
    rng = np.random.default_rng(seed)
    archive = CheckpointArchive(metadata={"source": "regression fixture"})
    for name, (gt, pred) in TARGETS.items():
        m = rng.gamma(2.0, 1.0, size=shape)
        m = (m * pred / m.sum()).astype(np.float32)
        # push the residual into one cell until the float64 sum rounds correctly
        for _ in range(10):
            resid = pred - float(m.sum(dtype=np.float64))
            if round(float(m.sum(dtype=np.float64)), 2) == pred and abs(resid) < 1e-4:
                break
            m[0, 0] = np.float32(m[0, 0] + resid)
        archive.add(f"density/{name}", m)
        archive.metadata[f"gt/{name}"] = str(gt)
        archive.metadata[f"pred/{name}"] = f"{pred:.2f}"
    return archive


if __name__ == "__main__":
    path = sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures/count_maps.csa"
    write_checkpoint(build(), path)
    print(f"wrote {path}")
