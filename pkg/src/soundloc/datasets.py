"""On-disk dataset layout: feature files, annotations, split manifest.

A dataset directory holds ``features/<video>.visual.tslf`` and
``features/<video>.audio.tslf`` pairs, an ``annotations.json`` and a
``manifest.json`` recording the generator settings, the seed and the
train/val/test split.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import data as dio
from .errors import AnnotationFormatError, ValidationError


@dataclass
class Dataset:
    """A loaded dataset: fused features plus annotations, keyed by video."""

    fused: dict[str, dio.FeatureSequence]
    annotations: dict[str, dio.AnnotationSet]
    class_names: list[str]
    splits: dict[str, list[str]] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def videos(self, split: str | None = None) -> list[str]:
        if split is None:
            return sorted(self.fused)
        if split not in self.splits:
            raise ValidationError(f"dataset has no {split!r} split")
        return list(self.splits[split])


def write_dataset(out_dir, spec: dio.SyntheticSpec,
                  split_counts: tuple[int, int, int] | None = None,
                  force: bool = False) -> dict:
    """Generate a synthetic dataset and write the directory layout."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(
            f"output directory {out} is not empty (use force to overwrite)")
    (out / "features").mkdir(parents=True, exist_ok=True)

    pairs, annotations = dio.generate_synthetic(spec)
    for visual, audio in pairs:
        dio.save_features(visual, out / "features" / f"{visual.video_id}.visual.tslf")
        dio.save_features(audio, out / "features" / f"{audio.video_id}.audio.tslf")
    dio.save_annotations(annotations, out / "annotations.json")

    ids = [v.video_id for v, _ in pairs]
    splits = dio.split_by_hash(ids, counts=split_counts)
    manifest = {
        "generator_spec": asdict(spec),
        "seed": spec.seed,
        "num_videos": len(ids),
        "splits": splits,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_feature_dir(features_dir) -> dict[str, dio.FeatureSequence]:
    """Fuse every visual/audio pair found in a features directory."""
    root = Path(features_dir)
    if not root.is_dir():
        raise ValidationError(f"features directory not found: {root}")
    visual: dict[str, dio.FeatureSequence] = {}
    audio: dict[str, dio.FeatureSequence] = {}
    for path in sorted(root.glob("*.tslf")):
        seq = dio.load_features(path)
        if seq.modality == "visual":
            visual[seq.video_id] = seq
        elif seq.modality == "audio":
            audio[seq.video_id] = seq
        else:
            # already-fused files pass straight through
            visual[seq.video_id] = seq
    fused = {}
    for vid, v in sorted(visual.items()):
        if v.modality == "fused":
            fused[vid] = v
        else:
            fused[vid] = dio.fuse_features(v, audio.get(vid))
    return fused


def load_dataset(root_dir) -> Dataset:
    root = Path(root_dir)
    fused = load_feature_dir(root / "features")
    anns = dio.load_annotations(root / "annotations.json")
    by_vid = {a.video_id: a for a in anns}
    missing = sorted(set(fused) - set(by_vid))
    if missing:
        raise AnnotationFormatError(
            f"{root}: features without annotations: {', '.join(missing[:5])}")

    manifest_path = root / "manifest.json"
    manifest: dict = {}
    splits: dict[str, list[str]] = {}
    if manifest_path.exists():
        try:
            with open(manifest_path, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise AnnotationFormatError(f"{manifest_path}: {exc}") from exc
        splits = manifest.get("splits", {})

    class_names = anns[0].class_names if anns else []
    return Dataset(fused=fused, annotations=by_vid, class_names=class_names,
                   splits=splits, manifest=manifest)
