"""The eight fusion metrics on hand-made fusions of one synthetic pair.

Each candidate is scored against both sources. Copying one source wins on
MI and edge preservation because half of every score is a perfect match.
Averaging halves the vessel contrast of both. Noise shares no structure with
either source and scores near zero on SSIM.

    python demos/04_metrics.py
"""
import numpy as np

from retfuse import data_io, metrics


def main():
    pair = data_io.generate_synthetic_pair(data_io.SyntheticSceneSpec(size=(96, 120), seed=4))
    a, b = pair.image1, pair.image2
    candidates = {
        "source 1": a,
        "average": 0.5 * (a + b),
        "maximum": np.maximum(a, b),
        "noise": np.random.default_rng(0).random(a.shape),
    }
    print(f"{'':10}" + "".join(f"{c:>8}" for c in metrics.COLUMNS))
    for name, fused in candidates.items():
        print(f"{name:10}" + "".join(f"{v:8.3f}" for v in metrics.evaluate_pair(fused, a, b).row()))
    print(f"\nMI(a, a) = {metrics.mutual_information(a, a):.4f} = EN(a) = {metrics.entropy(a):.4f}")


if __name__ == "__main__":
    main()
