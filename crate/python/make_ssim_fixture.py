"""Regenerates crates/core/tests/fixtures/ssim_reference.json with scikit-image."""

import json
import pathlib

import numpy as np
from skimage.metrics import structural_similarity

OUT = pathlib.Path(__file__).resolve().parents[1] / "crates/core/tests/fixtures/ssim_reference.json"


def reference(a, b):
    return structural_similarity(
        a, b, channel_axis=2, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )


def main():
    rng = np.random.default_rng(20240611)
    cases = []
    for i in range(20):
        h, w = int(rng.integers(11, 17)), int(rng.integers(11, 17))
        a = rng.random((h, w, 4))
        # Mix of correlated and independent pairs.
        mix = rng.random()
        b = np.clip(mix * a + (1 - mix) * rng.random((h, w, 4)), 0, 1)
        cases.append({"shape": [h, w, 4], "a": a.ravel().tolist(), "b": b.ravel().tolist(), "ssim": reference(a, b)})
    const = np.full((16, 16, 4), 0.3)
    cases.append(
        {"shape": [16, 16, 4], "a": const.ravel().tolist(), "b": (const + 0.1).ravel().tolist(),
         "ssim": reference(const, const + 0.1)}
    )
    OUT.write_text(json.dumps({"generator": "skimage.metrics.structural_similarity", "cases": cases}))


if __name__ == "__main__":
    main()
