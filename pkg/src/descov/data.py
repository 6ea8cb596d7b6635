"""Dataset schema, manifest ingestion, splitting, and synthetic data generation.

A dataset couples images with per-sample soft descriptor probabilities, a class
label, and a subgroup id.  The synthetic generator plants a long-tailed
coverage profile over (class, descriptor, subgroup) cells so that coverage
failures are reproducible on demand: descriptor presence rates decay as a power
law over the lexicographic cell index, labels follow a noisy boolean rule over
a pair of rare descriptors, and every present descriptor stamps a localized
colored blob into the image whose intensity tracks the soft probability.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, ManifestError

ARCHIVE_FORMAT_VERSION = 1

# Soft descriptor probabilities: a present descriptor is mapped into
# [0.7, 1.0] and an absent one into [0, 0.15], uniformly.
_PRESENT_LO = 0.7
_PRESENT_SPAN = 0.3
_ABSENT_SPAN = 0.15
_SOFT_PRESENT_MEAN = _PRESENT_LO + 0.5 * _PRESENT_SPAN  # 0.85
_SOFT_ABSENT_MEAN = 0.5 * _ABSENT_SPAN  # 0.075


@dataclass(frozen=True)
class DataDims:
    """Cardinalities shared by every sample in a dataset."""

    n_descriptors: int
    n_classes: int
    n_subgroups: int
    image_shape: tuple[int, int, int] = (3, 32, 32)

    def validate(self) -> None:
        if self.n_descriptors < 1:
            raise ConfigurationError("n_descriptors must be >= 1")
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be >= 2")
        if self.n_subgroups < 1:
            raise ConfigurationError("n_subgroups must be >= 1")
        if len(self.image_shape) != 3 or any(d < 1 for d in self.image_shape):
            raise ConfigurationError(f"bad image_shape {self.image_shape!r}")

    @property
    def n_groups(self) -> int:
        return self.n_classes * self.n_descriptors * self.n_subgroups


@dataclass(frozen=True)
class Sample:
    """A single record: image, soft descriptors, class label, subgroup id."""

    image: np.ndarray
    descriptors: np.ndarray
    class_label: int
    subgroup: int
    sample_id: str


@dataclass(frozen=True)
class GeneratorTruth:
    """Analytic ground truth of the planted distribution.

    ``presence_rates[c, d, k]`` is P(descriptor d present | class c, subgroup k)
    and ``soft_coverage`` is the matching expected soft probability.
    """

    presence_rates: np.ndarray
    soft_coverage: np.ndarray
    rule_descriptors: tuple[int, ...]
    noise_level: float

    def to_dict(self) -> dict:
        return {
            "presence_rates": self.presence_rates.tolist(),
            "soft_coverage": self.soft_coverage.tolist(),
            "rule_descriptors": list(self.rule_descriptors),
            "noise_level": self.noise_level,
        }

    @staticmethod
    def from_dict(d: dict) -> "GeneratorTruth":
        return GeneratorTruth(
            presence_rates=np.asarray(d["presence_rates"], dtype=np.float64),
            soft_coverage=np.asarray(d["soft_coverage"], dtype=np.float64),
            rule_descriptors=tuple(int(r) for r in d["rule_descriptors"]),
            noise_level=float(d["noise_level"]),
        )


@dataclass
class Dataset:
    """Columnar dataset; ``samples()`` yields row views."""

    images: np.ndarray  # (N, C, H, W) float32
    descriptors: np.ndarray  # (N, K) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    subgroups: np.ndarray  # (N,) int64
    sample_ids: list[str]
    dims: DataDims
    generator_truth: GeneratorTruth | None = None
    clamp_warnings: int = 0

    def __len__(self) -> int:
        return self.labels.shape[0]

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(
                image=self.images[i],
                descriptors=self.descriptors[i],
                class_label=int(self.labels[i]),
                subgroup=int(self.subgroups[i]),
                sample_id=self.sample_ids[i],
            )

    def validate(self) -> None:
        self.dims.validate()
        n = len(self)
        if self.images.shape != (n, *self.dims.image_shape):
            raise ConfigurationError(
                f"images shape {self.images.shape} != {(n, *self.dims.image_shape)}"
            )
        if self.descriptors.shape != (n, self.dims.n_descriptors):
            raise ConfigurationError("descriptor matrix shape mismatch")
        if self.subgroups.shape != (n,) or self.labels.shape != (n,):
            raise ConfigurationError("label/subgroup length mismatch")
        if len(self.sample_ids) != n:
            raise ConfigurationError("sample_ids length mismatch")
        if n and (self.descriptors.min() < 0.0 or self.descriptors.max() > 1.0):
            raise ConfigurationError("descriptor probabilities outside [0, 1]")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.dims.n_classes):
            raise ConfigurationError("class label out of range")
        if n and (self.subgroups.min() < 0 or self.subgroups.max() >= self.dims.n_subgroups):
            raise ConfigurationError("subgroup id out of range")
        if len(set(self.sample_ids)) != n:
            raise ConfigurationError("sample ids are not unique")

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            images=self.images[idx],
            descriptors=self.descriptors[idx],
            labels=self.labels[idx],
            subgroups=self.subgroups[idx],
            sample_ids=[self.sample_ids[i] for i in idx],
            dims=self.dims,
            generator_truth=self.generator_truth,
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.dims).encode())
        for arr in (self.images, self.descriptors, self.labels, self.subgroups):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("\x00".join(self.sample_ids).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic generator."""

    n_samples: int
    n_descriptors: int = 7
    n_classes: int = 2
    n_subgroups: int = 4
    tail_exponent: float = 1.5
    label_rule_seed: int = 0
    noise_level: float = 0.1
    rng_seed: int = 0
    image_shape: tuple[int, int, int] = (3, 32, 32)
    image_noise: float = 0.25
    stamp_amplitude: float = 1.6
    subgroup_skew: float = 1.0
    rate_floor: float = 0.02
    rate_ceil: float = 0.9

    def validate(self) -> None:
        if self.n_samples < 0:
            raise ConfigurationError("n_samples must be >= 0")
        self.dims().validate()
        if self.tail_exponent <= 0:
            raise ConfigurationError("tail_exponent must be > 0")
        if not 0.0 <= self.noise_level <= 0.5:
            raise ConfigurationError("noise_level must lie in [0, 0.5]")
        if not 0.0 < self.rate_floor <= self.rate_ceil <= 1.0:
            raise ConfigurationError("need 0 < rate_floor <= rate_ceil <= 1")

    def dims(self) -> DataDims:
        return DataDims(
            n_descriptors=self.n_descriptors,
            n_classes=self.n_classes,
            n_subgroups=self.n_subgroups,
            image_shape=tuple(self.image_shape),
        )


def planted_presence_rates(cfg: SynthConfig) -> np.ndarray:
    """Base presence rate per (class, descriptor, subgroup) cell.

    Rates decay as ``rate_ceil * (rank + 1) ** -tail_exponent`` over the
    lexicographic cell index and are floored at ``rate_floor``, which makes the
    tail long but never empty in expectation.
    """
    dims = cfg.dims()
    n = dims.n_classes * dims.n_descriptors * dims.n_subgroups
    ranks = np.arange(n, dtype=np.float64).reshape(
        dims.n_classes, dims.n_descriptors, dims.n_subgroups
    )
    rates = cfg.rate_ceil * (ranks + 1.0) ** (-cfg.tail_exponent)
    return np.maximum(rates, cfg.rate_floor)


def rule_descriptor_ids(cfg: SynthConfig) -> tuple[int, ...]:
    """The two rare descriptors whose OR (plus flip noise) defines the label.

    Labels are only rule-driven for binary tasks; with more classes the class
    is drawn independently of the descriptors.
    """
    if cfg.n_classes != 2:
        return ()
    k = cfg.n_descriptors
    candidates = np.arange(k // 2, k)
    if candidates.size < 2:
        candidates = np.arange(k)
    if candidates.size < 2:
        raise ConfigurationError("need at least 2 descriptors for a label rule")
    rng = np.random.default_rng(cfg.label_rule_seed)
    chosen = rng.choice(candidates, size=2, replace=False)
    return tuple(sorted(int(c) for c in chosen))


def _rule_combo_weights(q0: float, q1: float) -> np.ndarray:
    """Joint probabilities of the four (z0, z1) rule-descriptor settings."""
    return np.array(
        [
            (1 - q0) * (1 - q1),
            (1 - q0) * q1,
            q0 * (1 - q1),
            q0 * q1,
        ],
        dtype=np.float64,
    )


_RULE_COMBOS = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.int64)
_RULE_OR = np.array([0, 1, 1, 1], dtype=np.int64)


def _stamp_geometry(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed blob centers (on a ring), color signatures, per-descriptor sizes.

    Blob radii shrink with descriptor index, so the descriptors that sit deep
    in the coverage tail are also the spatially subtlest: peak intensity is
    unchanged, but a smaller footprint leaves less evidence to aggregate, which
    makes the under-covered patterns the slowest for a classifier to pick up.
    """
    _, h, w = cfg.image_shape
    k = cfg.n_descriptors
    c = cfg.image_shape[0]
    angles = 2.0 * math.pi * np.arange(k) / k
    centers = np.stack(
        [h / 2.0 + 0.3 * h * np.sin(angles), w / 2.0 + 0.3 * w * np.cos(angles)],
        axis=1,
    )
    chan = np.arange(c, dtype=np.float64)
    sigs = 0.5 + 0.5 * np.cos(angles[:, None] - 2.0 * math.pi * chan[None, :] / max(c, 1))
    frac = np.arange(k, dtype=np.float64) / max(k - 1, 1)
    sigmas = h * (0.13 - 0.078 * frac)
    return centers, sigs, sigmas


def _subgroup_visibility(n_subgroups: int) -> np.ndarray:
    """Stamp contrast multiplier per subgroup, 1.0 down to ~0.48.

    Minority subgroups (higher index, smaller share, lower planted coverage)
    get fainter stamps: their images are lower-contrast cohorts of the same
    patterns, so a model that allocates little capacity to them accumulates
    fixable errors exactly where coverage is thinnest.
    """
    frac = np.arange(n_subgroups, dtype=np.float64) / max(n_subgroups - 1, 1)
    return 1.0 - 0.52 * frac


def generate_synthetic_dataset(cfg: SynthConfig) -> Dataset:
    """Sample a dataset with planted long-tail descriptor coverage.

    Same config and seed produce byte-identical arrays.  The rule descriptors
    are drawn exactly from their conditional distribution given the (possibly
    flipped) label, so the analytic ``GeneratorTruth`` rates match empirical
    frequencies up to sampling error.
    """
    cfg.validate()
    dims = cfg.dims()
    n = cfg.n_samples
    k = dims.n_descriptors
    rng = np.random.default_rng(cfg.rng_seed)

    rates = planted_presence_rates(cfg)
    rule = rule_descriptor_ids(cfg)

    sub_weights = (np.arange(dims.n_subgroups, dtype=np.float64) + 1.0) ** (
        -cfg.subgroup_skew
    )
    sub_weights /= sub_weights.sum()

    subgroups = rng.choice(dims.n_subgroups, size=n, p=sub_weights).astype(np.int64)
    labels = rng.integers(0, dims.n_classes, size=n).astype(np.int64)
    flips = rng.random(n) < cfg.noise_level

    centers, sigs, sigmas = _stamp_geometry(cfg)
    visibility = _subgroup_visibility(dims.n_subgroups)
    _, h, w = cfg.image_shape
    yy, xx = np.mgrid[0:h, 0:w]

    images = np.empty((n, *cfg.image_shape), dtype=np.float32)
    descriptors = np.empty((n, k), dtype=np.float64)

    for i in range(n):
        c_i = int(labels[i])
        s_i = int(subgroups[i])
        cell_rates = rates[c_i, :, s_i]

        z = rng.random(k) < cell_rates
        if rule:
            target = c_i ^ int(flips[i])
            weights = _rule_combo_weights(cell_rates[rule[0]], cell_rates[rule[1]])
            weights = np.where(_RULE_OR == target, weights, 0.0)
            weights /= weights.sum()
            combo = int(np.searchsorted(np.cumsum(weights), rng.random()))
            combo = min(combo, 3)
            z[rule[0]] = bool(_RULE_COMBOS[combo, 0])
            z[rule[1]] = bool(_RULE_COMBOS[combo, 1])

        soft_u = rng.random(k)
        p = np.where(z, _PRESENT_LO + _PRESENT_SPAN * soft_u, _ABSENT_SPAN * soft_u)
        descriptors[i] = np.clip(p, 0.0, 1.0)

        img = rng.normal(0.0, cfg.image_noise, size=cfg.image_shape)
        for d in range(k):
            if not z[d]:
                continue
            dy, dx = rng.integers(-2, 3, size=2)
            cy, cx = centers[d, 0] + dy, centers[d, 1] + dx
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigmas[d] ** 2))
            img += (
                visibility[s_i]
                * cfg.stamp_amplitude
                * p[d]
                * sigs[d][:, None, None]
                * blob[None, :, :]
            )
        images[i] = img.astype(np.float32)

    truth = _analytic_truth(cfg, rates, rule)
    ds = Dataset(
        images=images,
        descriptors=descriptors,
        labels=labels,
        subgroups=subgroups,
        sample_ids=[f"s{i:06d}" for i in range(n)],
        dims=dims,
        generator_truth=truth,
    )
    ds.validate()
    return ds


def _analytic_truth(
    cfg: SynthConfig, rates: np.ndarray, rule: tuple[int, ...]
) -> GeneratorTruth:
    presence = rates.copy()
    if rule:
        r0, r1 = rule
        for c in range(cfg.n_classes):
            for s in range(cfg.n_subgroups):
                weights = _rule_combo_weights(rates[c, r0, s], rates[c, r1, s])
                cond = np.empty((2, 2))  # [rule outcome][which rule descriptor]
                for outcome in (0, 1):
                    wsel = np.where(_RULE_OR == outcome, weights, 0.0)
                    tot = wsel.sum()
                    cond[outcome, 0] = (wsel * _RULE_COMBOS[:, 0]).sum() / tot
                    cond[outcome, 1] = (wsel * _RULE_COMBOS[:, 1]).sum() / tot
                # With probability noise_level the label was flipped, so the
                # rule outcome conditioned on the final label mixes the two.
                nl = cfg.noise_level
                presence[c, r0, s] = (1 - nl) * cond[c, 0] + nl * cond[1 - c, 0]
                presence[c, r1, s] = (1 - nl) * cond[c, 1] + nl * cond[1 - c, 1]
    soft = _SOFT_PRESENT_MEAN * presence + _SOFT_ABSENT_MEAN * (1.0 - presence)
    return GeneratorTruth(
        presence_rates=presence,
        soft_coverage=soft,
        rule_descriptors=rule,
        noise_level=cfg.noise_level,
    )


# ---------------------------------------------------------------------------
# Manifest ingestion
# ---------------------------------------------------------------------------

_MANIFEST_FIXED = ("sample_id", "image_path", "class", "subgroup")


def load_manifest(
    path: str | Path,
    n_classes: int | None = None,
    n_subgroups: int | None = None,
    image_shape: tuple[int, int, int] = (3, 32, 32),
) -> Dataset:
    """Load a CSV manifest: sample_id,image_path,class,subgroup,d_1,...,d_K.

    ``image_path`` may be ``NONE`` for descriptor-only rows (a zero image is
    substituted); otherwise it is resolved relative to the manifest and must
    point at an ``.npy`` array.  Descriptor values outside [0, 1] are clamped
    and counted in ``Dataset.clamp_warnings``.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        header = [h.strip() for h in header]
        if tuple(header[:4]) != _MANIFEST_FIXED:
            raise ManifestError(
                f"{path}: header must start with {','.join(_MANIFEST_FIXED)}, "
                f"got {','.join(header[:4])}"
            )
        desc_cols = header[4:]
        if not desc_cols:
            raise ManifestError(f"{path}: no descriptor columns found")
        for i, name in enumerate(desc_cols):
            expected = f"d_{i + 1}"
            if name != expected:
                raise ManifestError(
                    f"{path}: descriptor column {i + 5} must be {expected!r}, got {name!r}"
                )
        k = len(desc_cols)

        ids: list[str] = []
        image_paths: list[str] = []
        label_list: list[int] = []
        subgroup_list: list[int] = []
        desc_rows: list[np.ndarray] = []
        clamped = 0
        for row_no, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4 + k:
                raise ManifestError(
                    f"{path}: row {row_no} has {len(row)} fields, expected {4 + k}"
                )
            sid = row[0].strip()
            if not sid:
                raise ManifestError(f"{path}: row {row_no} has empty sample_id")
            try:
                cls = int(row[2])
            except ValueError:
                raise ManifestError(
                    f"{path}: row {row_no} column 'class': {row[2]!r} is not an integer"
                ) from None
            try:
                sub = int(row[3])
            except ValueError:
                raise ManifestError(
                    f"{path}: row {row_no} column 'subgroup': {row[3]!r} is not an integer"
                ) from None
            if cls < 0:
                raise ManifestError(f"{path}: row {row_no}: negative class {cls}")
            if sub < 0:
                raise ManifestError(f"{path}: row {row_no}: negative subgroup {sub}")
            vals = np.empty(k, dtype=np.float64)
            for j, cell in enumerate(row[4:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise ManifestError(
                        f"{path}: row {row_no} column {desc_cols[j]!r}: "
                        f"{cell!r} is not a number"
                    ) from None
                if not math.isfinite(v):
                    raise ManifestError(
                        f"{path}: row {row_no} column {desc_cols[j]!r}: non-finite value"
                    )
                if v < 0.0 or v > 1.0:
                    clamped += 1
                    v = min(max(v, 0.0), 1.0)
                vals[j] = v
            ids.append(sid)
            image_paths.append(row[1].strip())
            label_list.append(cls)
            subgroup_list.append(sub)
            desc_rows.append(vals)

    if len(set(ids)) != len(ids):
        dup = sorted({s for s in ids if ids.count(s) > 1})[0]
        raise ManifestError(f"{path}: duplicate sample_id {dup!r}")

    n = len(ids)
    labels = np.asarray(label_list, dtype=np.int64)
    subgroups = np.asarray(subgroup_list, dtype=np.int64)
    t = n_classes if n_classes is not None else int(labels.max(initial=1)) + 1
    s = n_subgroups if n_subgroups is not None else int(subgroups.max(initial=0)) + 1
    t = max(t, 2)
    if n and labels.max() >= t:
        raise ManifestError(f"{path}: class {int(labels.max())} >= n_classes {t}")
    if n and subgroups.max() >= s:
        raise ManifestError(f"{path}: subgroup {int(subgroups.max())} >= n_subgroups {s}")

    shape = tuple(image_shape)
    images = np.zeros((n, *shape), dtype=np.float32)
    for i, rel in enumerate(image_paths):
        if rel == "NONE" or rel == "":
            continue
        img_path = path.parent / rel
        try:
            arr = np.load(img_path)
        except OSError as exc:
            raise ManifestError(f"{path}: row {i + 1}: cannot read image {rel!r}: {exc}")
        if arr.shape != shape:
            raise ManifestError(
                f"{path}: row {i + 1}: image shape {arr.shape} != {shape}"
            )
        images[i] = arr.astype(np.float32)

    dims = DataDims(
        n_descriptors=k, n_classes=t, n_subgroups=s, image_shape=shape
    )
    ds = Dataset(
        images=images,
        descriptors=np.stack(desc_rows) if n else np.empty((0, k), dtype=np.float64),
        labels=labels,
        subgroups=subgroups,
        sample_ids=ids,
        dims=dims,
        clamp_warnings=clamped,
    )
    ds.validate()
    return ds


def write_manifest(
    ds: Dataset, path: str | Path, image_dir: str | Path | None = None
) -> None:
    """Write a dataset as a manifest CSV.

    Without ``image_dir`` the image_path column is NONE (descriptor-only rows);
    with it, each image is saved as ``<image_dir>/<sample_id>.npy`` and
    referenced relative to the manifest.
    """
    path = Path(path)
    rel_paths: list[str] = []
    if image_dir is not None:
        image_dir = Path(image_dir)
        image_dir.mkdir(parents=True, exist_ok=True)
        for s in ds.samples():
            img_path = image_dir / f"{s.sample_id}.npy"
            np.save(img_path, s.image)
            rel_paths.append(os.path.relpath(img_path, path.parent))
    else:
        rel_paths = ["NONE"] * len(ds)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            list(_MANIFEST_FIXED) + [f"d_{j + 1}" for j in range(ds.dims.n_descriptors)]
        )
        for s, rel in zip(ds.samples(), rel_paths):
            writer.writerow(
                [s.sample_id, rel, s.class_label, s.subgroup]
                + [repr(float(v)) for v in s.descriptors]
            )


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split_dataset(
    ds: Dataset,
    ratios: Sequence[float],
    group_key: str | Sequence | None = None,
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Split into train/val/test by rounded cumulative ratios.

    With ``group_key`` set (a field name such as ``"subgroup"`` or an explicit
    per-sample key array), whole key groups are assigned to one split: groups
    are shuffled and dealt greedily into train, then val, then test, advancing
    once a split has reached its rounded target size.
    """
    if len(ratios) != 3:
        raise ConfigurationError("ratios must have exactly 3 entries")
    if any(r < 0 for r in ratios):
        raise ConfigurationError("ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must sum to 1, got {sum(ratios)}")

    n = len(ds)
    bounds = [int(round(sum(ratios[: i + 1]) * n)) for i in range(3)]
    bounds[2] = n
    rng = np.random.default_rng(seed)

    if group_key is None:
        perm = rng.permutation(n)
        parts = [np.sort(perm[:bounds[0]]), np.sort(perm[bounds[0]:bounds[1]]), np.sort(perm[bounds[1]:])]
    else:
        if isinstance(group_key, str):
            if group_key == "subgroup":
                keys = list(ds.subgroups)
            elif group_key == "class":
                keys = list(ds.labels)
            elif group_key == "sample_id":
                keys = list(ds.sample_ids)
            else:
                raise ConfigurationError(f"unknown group_key field {group_key!r}")
        else:
            keys = list(group_key)
            if len(keys) != n:
                raise ConfigurationError("group_key array length mismatch")
        order: dict = {}
        for key in keys:
            if key not in order:
                order[key] = len(order)
        groups = list(order)
        rng.shuffle(groups)
        members: dict = {g: [] for g in groups}
        for i, key in enumerate(keys):
            members[key].append(i)
        parts = [[], [], []]
        assigned = 0
        j = 0
        for g in groups:
            while j < 2 and assigned >= bounds[j]:
                j += 1
            parts[j].extend(members[g])
            assigned += len(members[g])
        parts = [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]

    return tuple(ds.subset(p) for p in parts)  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Deterministic archives
# ---------------------------------------------------------------------------

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.external_attr = 0o600 << 16
    zf.writestr(info, payload)


def zip_write_array(zf: zipfile.ZipFile, name: str, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), version=(1, 0))
    _zip_write(zf, name, buf.getvalue())


def zip_read_array(zf: zipfile.ZipFile, name: str) -> np.ndarray:
    with zf.open(name) as fh:
        return np.lib.format.read_array(io.BytesIO(fh.read()))


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write a dataset archive; identical datasets produce identical bytes."""
    ds.validate()
    meta = {
        "format_version": ARCHIVE_FORMAT_VERSION,
        "kind": "dataset",
        "dims": {
            "n_descriptors": ds.dims.n_descriptors,
            "n_classes": ds.dims.n_classes,
            "n_subgroups": ds.dims.n_subgroups,
            "image_shape": list(ds.dims.image_shape),
        },
        "sample_ids": ds.sample_ids,
        "clamp_warnings": ds.clamp_warnings,
        "generator_truth": ds.generator_truth.to_dict() if ds.generator_truth else None,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True).encode())
        zip_write_array(zf, "images.npy", ds.images)
        zip_write_array(zf, "descriptors.npy", ds.descriptors)
        zip_write_array(zf, "labels.npy", ds.labels)
        zip_write_array(zf, "subgroups.npy", ds.subgroups)


def load_dataset(path: str | Path) -> Dataset:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("kind") != "dataset":
            raise ConfigurationError(f"{path}: not a dataset archive")
        if meta.get("format_version") != ARCHIVE_FORMAT_VERSION:
            raise ConfigurationError(
                f"{path}: unsupported archive version {meta.get('format_version')}"
            )
        d = meta["dims"]
        dims = DataDims(
            n_descriptors=d["n_descriptors"],
            n_classes=d["n_classes"],
            n_subgroups=d["n_subgroups"],
            image_shape=tuple(d["image_shape"]),
        )
        truth = meta.get("generator_truth")
        ds = Dataset(
            images=zip_read_array(zf, "images.npy"),
            descriptors=zip_read_array(zf, "descriptors.npy"),
            labels=zip_read_array(zf, "labels.npy"),
            subgroups=zip_read_array(zf, "subgroups.npy"),
            sample_ids=list(meta["sample_ids"]),
            dims=dims,
            generator_truth=GeneratorTruth.from_dict(truth) if truth else None,
            clamp_warnings=int(meta.get("clamp_warnings", 0)),
        )
    ds.validate()
    return ds
