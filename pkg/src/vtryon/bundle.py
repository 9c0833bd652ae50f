"""Sequence bundles: a directory of CFT tensors plus a plain-text manifest.

The manifest is line-oriented ``key=value`` text: the sequence dimensions
(T, H, W) followed by a role table mapping each tensor role to its file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import cft

MANIFEST_NAME = "manifest.txt"

REQUIRED_ROLES = (
    "frames", "seg", "dense", "pose", "matte", "clothes", "optical_flows",
)
OPTIONAL_ROLES = (
    "gt_flows", "flows", "occlusion", "clothes_mask", "garment_mask", "omega",
)

_EXPECTED_SHAPE = {
    # spatial template per role; T, H, W filled in at validation time
    "frames": ("T", "H", "W", 3),
    "seg": ("T", "H", "W"),
    "dense": ("T", "H", "W"),
    "matte": ("T", "H", "W"),
    "optical_flows": ("T", "H", "W", 2),
    "gt_flows": ("T", "H", "W", 2),
    "flows": ("T", "H", "W", 2),
    "occlusion": ("T", "H", "W"),
    "garment_mask": ("T", "H", "W"),
    "omega": ("T", "H", "W"),
    "clothes": ("H", "W", 3),
    "clothes_mask": ("H", "W"),
}


class BundleError(ValueError):
    pass


@dataclass
class SequenceBundle:
    T: int
    H: int
    W: int
    tensors: dict = field(default_factory=dict)  # role -> float64 ndarray

    def __getitem__(self, role: str) -> np.ndarray:
        if role not in self.tensors:
            raise BundleError(f"missing role: {role}")
        return self.tensors[role]

    def __contains__(self, role: str) -> bool:
        return role in self.tensors

    def validate(self):
        for role in REQUIRED_ROLES:
            if role not in self.tensors:
                raise BundleError(f"missing role: {role}")
        dims = {"T": self.T, "H": self.H, "W": self.W}
        for role, arr in self.tensors.items():
            template = _EXPECTED_SHAPE.get(role)
            if template is None:
                continue
            expected = tuple(dims.get(d, d) for d in template)
            if arr.shape != expected:
                raise BundleError(
                    f"role {role}: shape {arr.shape}, expected {expected}"
                )
        if self.tensors["pose"].shape[0] != self.T:
            raise BundleError("role pose: first dimension must be T")

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        lines = [f"T={self.T}", f"H={self.H}", f"W={self.W}"]
        for role in sorted(self.tensors):
            fname = f"{role}.cft"
            cft.write_tensor(os.path.join(directory, fname), self.tensors[role])
            lines.append(f"role.{role}={fname}")
        with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "SequenceBundle":
        path = os.path.join(directory, MANIFEST_NAME)
        if not os.path.exists(path):
            raise BundleError(f"no manifest at {path}")
        meta, roles = {}, {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, val = line.partition("=")
                if key.startswith("role."):
                    roles[key[5:]] = val
                else:
                    meta[key] = val
        try:
            T, H, W = int(meta["T"]), int(meta["H"]), int(meta["W"])
        except KeyError as e:
            raise BundleError(f"manifest missing dimension {e}") from None
        tensors = {}
        for role, fname in roles.items():
            fpath = os.path.join(directory, fname)
            if not os.path.exists(fpath):
                raise BundleError(f"manifest entry does not resolve: {fname}")
            tensors[role] = cft.read_tensor(fpath)
        bundle = cls(T, H, W, tensors)
        bundle.validate()
        return bundle


def save_named_tensors(directory, tensors: dict, manifest="params.txt"):
    """Checkpoint helper: one CFT file per named tensor plus an index."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for i, name in enumerate(sorted(tensors)):
        fname = f"p{i:04d}.cft"
        cft.write_tensor(os.path.join(directory, fname), tensors[name])
        lines.append(f"{name}={fname}")
    with open(os.path.join(directory, manifest), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_named_tensors(directory, manifest="params.txt") -> dict:
    path = os.path.join(directory, manifest)
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            name, _, fname = line.partition("=")
            out[name] = cft.read_tensor(os.path.join(directory, fname))
    return out
