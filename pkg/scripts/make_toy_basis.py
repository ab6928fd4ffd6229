#!/usr/bin/env python3
"""Regenerate the bundled toy vehicle shape basis (src/clipart3d/data/toy_basis.json)."""

import os
import sys

from clipart3d.shape_model import save_basis, toy_vehicle_basis


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(
        os.path.dirname(__file__), "..", "src", "clipart3d", "data", "toy_basis.json"
    )
    os.makedirs(os.path.dirname(out), exist_ok=True)
    basis = toy_vehicle_basis()
    save_basis(basis, out)
    print(f"wrote {out}: N={basis.n_keypoints} K={basis.n_components}")


if __name__ == "__main__":
    main()
