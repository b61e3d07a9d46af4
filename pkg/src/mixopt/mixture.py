"""Domain dataset management: loading, synthesis, and beta-driven resampling.

A mixture is a list of labeled per-domain example pools plus a held-out
reference set (disjoint from all training domains by example identity).
Resampling follows the size law new = max(1, round_half_up((1+beta)*old)):
positive beta duplicates uniformly with replacement, negative beta keeps a
uniform without-replacement subset.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (DimensionMismatchError, InvalidInputError,
                     ManifestSchemaError, MissingFileError,
                     ReferenceOverlapError)
from .linalg import seeded_rng
from .model import Examples

SCENARIO_KINDS = ("benign", "conflict", "skewed-reference")

_SYNTH_FEATURES = 5
_SYNTH_CLASSES = 3
_SYNTH_RADIUS = 2.2
_SYNTH_REGION_OFFSET = 4.0
_SKEW_FRACTION = 0.75

# label rules per domain: permutations of the shared cluster identities;
# neighbouring domains agree on part of the feature space
_CONFLICT_PERMS = ((0, 1, 2), (1, 0, 2), (0, 2, 1), (2, 1, 0), (1, 2, 0))
_REGION_OFFSETS = ((1, 0, 0), (0, 1, 0), (0, 0, 1), (-1, 0, 0), (0, -1, 0))


@dataclass(frozen=True)
class Provenance:
    kind: str  # "file" | "synthetic" | "resampled"
    parent: str | None = None
    seed: int | None = None


@dataclass(frozen=True)
class DomainDataset:
    name: str
    examples: Examples
    provenance: Provenance
    origins: np.ndarray | None = None  # per-example source-domain tags

    @property
    def n(self) -> int:
        return self.examples.n


@dataclass(frozen=True)
class MixtureState:
    iteration: int
    domains: tuple[DomainDataset, ...]
    reference: DomainDataset
    n_classes: int
    beta_history: tuple[np.ndarray, ...] = field(default_factory=tuple)

    @property
    def sizes(self) -> list[int]:
        return [d.n for d in self.domains]

    @property
    def total(self) -> int:
        return sum(self.sizes)

    @property
    def feature_dim(self) -> int:
        return self.domains[0].examples.X.shape[1]

    @property
    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]

    def union(self) -> Examples:
        X = np.vstack([d.examples.X for d in self.domains])
        y = np.concatenate([d.examples.y for d in self.domains])
        return Examples(X, y)


def _example_keys(ex: Examples):
    return {(ex.X[i].tobytes(), int(ex.y[i])) for i in range(ex.n)}


def validate_mixture(state: MixtureState) -> None:
    """Check dimension consistency and reference/domain disjointness."""
    dim = state.feature_dim
    for d in state.domains:
        if d.examples.X.shape[1] != dim:
            raise DimensionMismatchError(
                f"domain {d.name!r} has feature dim {d.examples.X.shape[1]}, "
                f"expected {dim}")
        if np.any(d.examples.y >= state.n_classes):
            raise ManifestSchemaError(
                f"domain {d.name!r} has a label >= {state.n_classes}")
    if state.reference.examples.X.shape[1] != dim:
        raise DimensionMismatchError(
            f"reference has feature dim {state.reference.examples.X.shape[1]}, "
            f"expected {dim}")
    if np.any(state.reference.examples.y >= state.n_classes):
        raise ManifestSchemaError(f"reference has a label >= {state.n_classes}")
    ref_keys = _example_keys(state.reference.examples)
    for d in state.domains:
        if ref_keys & _example_keys(d.examples):
            raise ReferenceOverlapError(
                f"reference shares an example with domain {d.name!r}")


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def apply_beta(state: MixtureState, beta, rng: np.random.Generator) -> MixtureState:
    """Resample every domain to max(1, round((1+beta_i) * size_i)) examples.

    Growth duplicates current examples uniformly with replacement; shrinkage
    keeps a uniform without-replacement subset. beta_i = 0 leaves the domain
    untouched. Returns a new state with the iteration count bumped and beta
    appended to the history.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (len(state.domains),):
        raise InvalidInputError(
            f"beta length {beta.shape} != domain count {len(state.domains)}")
    if not np.all(np.isfinite(beta)) or np.any(beta <= -1.0):
        raise InvalidInputError("every beta entry must be finite and > -1")
    children = rng.spawn(len(state.domains))
    new_domains = []
    for domain, b, child in zip(state.domains, beta, children):
        n = domain.n
        target = max(1, _round_half_up((1.0 + float(b)) * n))
        if b == 0.0:
            new_domains.append(domain)
            continue
        if target >= n:
            extra = child.integers(0, n, size=target - n)
            idx = np.concatenate([np.arange(n), extra])
        else:
            idx = np.sort(child.choice(n, size=target, replace=False))
        ex = domain.examples.subset(idx)
        origins = domain.origins[idx] if domain.origins is not None else None
        new_domains.append(DomainDataset(
            name=domain.name, examples=ex,
            provenance=Provenance(kind="resampled", parent=domain.name),
            origins=origins))
    return replace(state, iteration=state.iteration + 1,
                   domains=tuple(new_domains),
                   beta_history=state.beta_history + (beta.copy(),))


# ---------------------------------------------------------------- manifests

_MANIFEST_KEYS = {"feature_dim", "classes", "domains", "reference"}
_EXAMPLE_KEYS = {"x", "y", "origin"}


def _read_examples_file(path: Path, label: str, feature_dim: int,
                        classes: int):
    if not path.exists():
        raise MissingFileError(f"data file for {label!r} not found: {path}")
    xs, ys, origins = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestSchemaError(
                    f"{label!r} line {lineno}: invalid JSON ({e})") from e
            if not isinstance(obj, dict) or not set(obj) <= _EXAMPLE_KEYS \
                    or "x" not in obj or "y" not in obj:
                raise ManifestSchemaError(
                    f"{label!r} line {lineno}: expected keys 'x' and 'y'")
            x = obj["x"]
            if not isinstance(x, list) or not all(
                    isinstance(v, (int, float)) for v in x):
                raise ManifestSchemaError(
                    f"{label!r} line {lineno}: 'x' must be a number list")
            if len(x) != feature_dim:
                raise DimensionMismatchError(
                    f"{label!r} line {lineno}: feature length {len(x)} "
                    f"!= declared dimension {feature_dim}")
            y = obj["y"]
            if not isinstance(y, int) or isinstance(y, bool) \
                    or not (0 <= y < classes):
                raise ManifestSchemaError(
                    f"{label!r} line {lineno}: 'y' must be an int in "
                    f"[0, {classes})")
            xs.append(x)
            ys.append(y)
            origins.append(obj.get("origin"))
    if not xs:
        raise ManifestSchemaError(f"{label!r} contains no examples")
    ex = Examples(np.asarray(xs, dtype=float), np.asarray(ys, dtype=np.int64))
    tags = (np.asarray(origins, dtype=object)
            if any(o is not None for o in origins) else None)
    return ex, tags


def load_manifest(path) -> MixtureState:
    """Load a mixture from a JSON manifest plus JSONL domain files.

    Manifest schema:
      {"feature_dim": int, "classes": int,
       "domains": [{"name": str, "path": str}, ...],
       "reference": {"path": str}}
    Paths are relative to the manifest's directory. Domain files are JSONL
    with one {"x": [...], "y": int} object per line; reference lines may
    carry an optional "origin" tag for per-domain slice reporting.
    """
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"manifest not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestSchemaError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(raw, dict) or set(raw) != _MANIFEST_KEYS:
        raise ManifestSchemaError(
            f"manifest must have exactly the keys {sorted(_MANIFEST_KEYS)}")
    feature_dim, classes = raw["feature_dim"], raw["classes"]
    if not isinstance(feature_dim, int) or feature_dim < 1:
        raise ManifestSchemaError("feature_dim must be a positive int")
    if not isinstance(classes, int) or classes < 2:
        raise ManifestSchemaError("classes must be an int >= 2")
    if not isinstance(raw["domains"], list) or not raw["domains"]:
        raise ManifestSchemaError("domains must be a nonempty list")
    base = p.parent
    domains = []
    seen = set()
    for entry in raw["domains"]:
        if not isinstance(entry, dict) or set(entry) != {"name", "path"}:
            raise ManifestSchemaError(
                "each domain entry needs exactly 'name' and 'path'")
        name = entry["name"]
        if not isinstance(name, str) or not name or name in seen:
            raise ManifestSchemaError(f"bad or duplicate domain name {name!r}")
        seen.add(name)
        ex, _ = _read_examples_file(base / entry["path"], name, feature_dim,
                                    classes)
        domains.append(DomainDataset(name=name, examples=ex,
                                     provenance=Provenance(kind="file")))
    ref_entry = raw["reference"]
    if not isinstance(ref_entry, dict) or set(ref_entry) != {"path"}:
        raise ManifestSchemaError("reference needs exactly the key 'path'")
    ref_ex, tags = _read_examples_file(base / ref_entry["path"], "reference",
                                       feature_dim, classes)
    reference = DomainDataset(name="reference", examples=ref_ex,
                              provenance=Provenance(kind="file"),
                              origins=tags)
    state = MixtureState(iteration=0, domains=tuple(domains),
                         reference=reference, n_classes=classes)
    validate_mixture(state)
    return state


def write_dataset_files(state: MixtureState, out_dir) -> list[Path]:
    """Write manifest + JSONL files for a mixture; returns written paths."""
    from .jsonio import canonical_dumps  # local import to avoid a cycle

    out = Path(out_dir)
    (out / "domains").mkdir(parents=True, exist_ok=True)
    written = []
    entries = []
    for d in state.domains:
        rel = f"domains/{d.name}.jsonl"
        fp = out / rel
        with open(fp, "w", encoding="utf-8") as fh:
            for i in range(d.n):
                fh.write(canonical_dumps(
                    {"x": d.examples.X[i].tolist(),
                     "y": int(d.examples.y[i])}) + "\n")
        entries.append({"name": d.name, "path": rel})
        written.append(fp)
    ref = state.reference
    ref_path = out / "reference.jsonl"
    with open(ref_path, "w", encoding="utf-8") as fh:
        for i in range(ref.n):
            row = {"x": ref.examples.X[i].tolist(), "y": int(ref.examples.y[i])}
            if ref.origins is not None:
                row["origin"] = str(ref.origins[i])
            fh.write(canonical_dumps(row) + "\n")
    written.append(ref_path)
    manifest = {"feature_dim": state.feature_dim, "classes": state.n_classes,
                "domains": entries, "reference": {"path": "reference.jsonl"}}
    mp = out / "manifest.json"
    mp.write_text(canonical_dumps(manifest) + "\n", encoding="utf-8")
    written.append(mp)
    return written


# ------------------------------------------------------- synthetic scenarios

def _class_centers() -> np.ndarray:
    centers = np.zeros((_SYNTH_CLASSES, _SYNTH_FEATURES))
    for c in range(_SYNTH_CLASSES):
        angle = math.pi / 2 + 2 * math.pi * c / _SYNTH_CLASSES
        centers[c, 0] = _SYNTH_RADIUS * math.cos(angle)
        centers[c, 1] = _SYNTH_RADIUS * math.sin(angle)
    return centers


def _domain_params(kind: str, i: int):
    """(cluster centers, cluster->label permutation) for domain i."""
    centers = _class_centers()
    if kind == "benign":
        offset = np.zeros(_SYNTH_FEATURES)
        ox = _REGION_OFFSETS[i % len(_REGION_OFFSETS)]
        offset[2:5] = _SYNTH_REGION_OFFSET * np.asarray(ox)
        return centers + offset, (0, 1, 2)
    return centers, _CONFLICT_PERMS[i % len(_CONFLICT_PERMS)]


def _draw(kind: str, i: int, n: int, rng: np.random.Generator):
    centers, perm = _domain_params(kind, i)
    cluster = rng.integers(0, _SYNTH_CLASSES, size=n)
    X = centers[cluster] + rng.standard_normal((n, _SYNTH_FEATURES))
    y = np.asarray(perm, dtype=np.int64)[cluster]
    return X, y


def synth_scenario(kind: str, sizes, seed: int) -> MixtureState:
    """Deterministic Gaussian-cluster classification mixture.

    benign: every domain occupies its own feature region with one shared,
    consistent label rule. conflict: all domains overlap in feature space
    but disagree (pairwise partially) on cluster labels. skewed-reference:
    conflict-style domains with a reference drawn 75% from domain 0.
    The reference (about 1/8 of the training size, at least 60 examples)
    carries per-example origin tags.
    """
    if kind not in SCENARIO_KINDS:
        raise InvalidInputError(
            f"unknown scenario kind {kind!r}; choose from {SCENARIO_KINDS}")
    sizes = [int(s) for s in sizes]
    if not sizes or any(s < 1 for s in sizes):
        raise InvalidInputError("all domain sizes must be positive")
    if len(sizes) > len(_CONFLICT_PERMS):
        raise InvalidInputError(
            f"at most {len(_CONFLICT_PERMS)} domains supported")
    root = seeded_rng(seed)
    children = root.spawn(len(sizes) + 1)
    domains = []
    for i, (n, child) in enumerate(zip(sizes, children[:-1])):
        X, y = _draw(kind, i, n, child)
        domains.append(DomainDataset(
            name=f"dom{i}", examples=Examples(X, y),
            provenance=Provenance(kind="synthetic", seed=seed)))

    n_ref = max(60, sum(sizes) // 8)
    if kind == "skewed-reference":
        counts = [int(round(n_ref * _SKEW_FRACTION))]
        rest = n_ref - counts[0]
        others = len(sizes) - 1
        counts += [rest // others + (1 if r < rest % others else 0)
                   for r in range(others)] if others else []
    else:
        counts = [n_ref // len(sizes) + (1 if r < n_ref % len(sizes) else 0)
                  for r in range(len(sizes))]
    ref_rng = children[-1]
    ref_children = ref_rng.spawn(len(sizes))
    xs, ys, tags = [], [], []
    for i, (cnt, child) in enumerate(zip(counts, ref_children)):
        if cnt == 0:
            continue
        X, y = _draw(kind, i, cnt, child)
        xs.append(X)
        ys.append(y)
        tags.extend([f"dom{i}"] * cnt)
    reference = DomainDataset(
        name="reference", examples=Examples(np.vstack(xs), np.concatenate(ys)),
        provenance=Provenance(kind="synthetic", seed=seed),
        origins=np.asarray(tags, dtype=object))
    state = MixtureState(iteration=0, domains=tuple(domains),
                         reference=reference, n_classes=_SYNTH_CLASSES)
    validate_mixture(state)
    return state
