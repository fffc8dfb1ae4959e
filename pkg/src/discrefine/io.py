"""On-disk layout for cases, predictions and checkpoints.

A case directory holds::

    image.npz   data (4, D, W, H) float32, spacing (3,), foreground (4, D, W, H) bool
    label.npz   labels (D, W, H) uint8, spacing (3,)
    meta.json   generator spec, spacing, foreground checksum

A prediction directory holds one ``<case_id>.npz`` per case with ``mask``
(3, D, W, H) uint8, ``spacing`` and optionally ``soft`` (3, D, W, H) float32.
``.npz`` records dtype and shape per array, so the files are self-describing.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .phantom import DisjointLabelMap, MultiContrastVolume, PhantomSpec, RegionMask, generate_phantom


def foreground_checksum(foreground):
    packed = np.packbits(np.asarray(foreground, dtype=bool).ravel())
    return hashlib.sha256(packed.tobytes()).hexdigest()


def write_case(case_dir, vol: MultiContrastVolume, labels: DisjointLabelMap, extra_meta=None):
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    fg = vol.foreground if vol.foreground is not None else vol.data != 0
    np.savez_compressed(
        case_dir / "image.npz",
        data=vol.data.astype(np.float32),
        spacing=np.asarray(vol.spacing),
        foreground=fg,
    )
    np.savez_compressed(case_dir / "label.npz", labels=labels.labels.astype(np.uint8), spacing=np.asarray(labels.spacing))
    meta = {
        "spec": vol.meta,
        "spacing": list(vol.spacing),
        "shape": list(vol.shape),
        "foreground_sha256": foreground_checksum(fg),
        "format": "npz-v1",
    }
    if extra_meta:
        meta.update(extra_meta)
    (case_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_case(case_dir):
    case_dir = Path(case_dir)
    with np.load(case_dir / "image.npz") as z:
        spacing = tuple(z["spacing"].tolist())
        fg = z["foreground"] if "foreground" in z.files else None
        data = z["data"]
    meta = {}
    if (case_dir / "meta.json").exists():
        meta = json.loads((case_dir / "meta.json").read_text())
        if fg is not None and meta.get("foreground_sha256") not in (None, foreground_checksum(fg)):
            raise ValueError(f"{case_dir}: foreground checksum mismatch")
    vol = MultiContrastVolume(data, spacing, meta.get("spec", {}), foreground=fg)
    with np.load(case_dir / "label.npz") as z:
        labels = DisjointLabelMap(z["labels"], tuple(z["spacing"].tolist()))
    return vol, labels


def list_cases(data_dir):
    data_dir = Path(data_dir)
    ids = sorted(p.name for p in data_dir.iterdir() if (p / "image.npz").exists())
    if not ids:
        raise FileNotFoundError(f"no cases under {data_dir}")
    return ids


def generate_dataset(out_dir, n_cases, spec: PhantomSpec):
    """Write ``n_cases`` phantoms; case ``i`` uses seed ``spec.seed + i``."""
    out_dir = Path(out_dir)
    ids = []
    for i in range(n_cases):
        case_id = f"case_{i:04d}"
        vol, labels = generate_phantom(spec.with_seed(spec.seed + i))
        write_case(out_dir / case_id, vol, labels, {"case_id": case_id})
        ids.append(case_id)
    return ids


def write_prediction(pred_dir, case_id, mask: RegionMask, soft=None):
    pred_dir = Path(pred_dir)
    pred_dir.mkdir(parents=True, exist_ok=True)
    arrays = {"mask": mask.channels.astype(np.uint8), "spacing": np.asarray(mask.spacing)}
    if soft is not None:
        arrays["soft"] = np.asarray(soft, dtype=np.float32)
    np.savez_compressed(pred_dir / f"{case_id}.npz", **arrays)


def read_prediction(pred_dir, case_id):
    with np.load(Path(pred_dir) / f"{case_id}.npz") as z:
        return RegionMask(z["mask"], tuple(z["spacing"].tolist()))


def list_predictions(pred_dir):
    return sorted(p.stem for p in Path(pred_dir).glob("*.npz"))


def read_brats_case(case_dir):
    """Read a BraTS-style case folder of NIfTI files (t1n, t1c, t2w, t2f, seg).

    Needs the optional ``nibabel`` dependency. BraTS codes ET as 3 (2023) or
    4 (earlier releases); both are mapped to 3.
    """
    try:
        import nibabel as nib
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ImportError("reading NIfTI cases needs nibabel: pip install 'artifact[nifti]'") from exc

    case_dir = Path(case_dir)
    files = sorted(case_dir.glob("*.nii*"))

    def pick(*keys):
        for key in keys:
            hits = [f for f in files if f.name.split(".")[0].lower().endswith(key)]
            if hits:
                return hits[0]
        raise FileNotFoundError(f"{case_dir}: no file ending in any of {keys}")

    imgs = [nib.load(pick(*k)) for k in (("t1n", "t1"), ("t1c", "t1ce"), ("t2w", "t2"), ("t2f", "flair"))]
    spacing = tuple(float(s) for s in imgs[0].header.get_zooms()[:3])
    data = np.stack([np.asarray(im.dataobj, dtype=np.float32) for im in imgs])
    seg = np.asarray(nib.load(pick("seg")).dataobj).astype(np.uint8)
    seg[seg == 4] = 3
    vol = MultiContrastVolume(data, spacing, {"source": str(case_dir)}, foreground=data != 0)
    return vol, DisjointLabelMap(seg, spacing)
