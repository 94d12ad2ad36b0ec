"""Synthetic benchmark with planted parts.

A dataset draws a global bank of unit-norm template kernels, one kernel
per scale for every bank column, and assigns one column to every
(part, channel) slot. Each class is a sparse signature saying which
(scale, channel) slots each part expresses and how strongly, plus a
canonical part layout. Rendering places every active kernel, scaled by
its jittered coefficient, at the part's jittered location and adds
white noise, either directly in feature space or as pixel patches in a
small image.

Classes come in families of three siblings that share a layout and
differ by one large coefficient shift: the first sibling shifts a slot
at the largest scale, the second at the smallest shape scale. Sibling
gaps exceed the worst-case jitter spread, so zero-noise renders stay
on the correct side of every decision boundary by construction.

Kernels at scales above one have zero mean and a zero center entry,
and smaller kernels are orthogonal to the center crops of larger ones.
Content planted at one scale then reads as exactly zero at every other
scale, and average pooling sees nothing of the shaped slots.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .autodiff import no_grad
from .parsing import ParserConfig, PartDictionary, parse
from .seeding import derive_rng

_SPLIT_NAMES = ("train", "val", "test")

# coefficient ranges by scale bucket; single-cell kernels carry no
# shape, so their coefficients stay small to keep scores unambiguous
_COEF_RANGE_POINT = (0.25, 0.35)
_COEF_RANGE_SHAPE = (0.5, 0.7)
_COEF_CAP = 1.3
# sibling classes differ by this much on one slot; it clears the
# truncated jitter spread (4 sigma) with a wide margin
_SIBLING_SHIFT = 0.55

_PROBES_PER_CLASS = 12
_CLASS_ATTEMPTS = 60
_SCORE_MARGIN = 0.02
_RIVAL_MARGIN = 0.05


@dataclass(frozen=True)
class SyntheticConfig:
    """Generation settings for one dataset."""

    grid: int = 10
    channels: int = 16
    k_parts: int = 3
    scales: tuple = (1, 3, 5)
    bank_size: int = 64
    n_classes: int = 35
    splits: tuple = (20, 5, 10)
    samples_per_class: int = 20
    noise_sigma: float = 0.05
    loc_sigma: float = 0.7
    coef_sigma: float = 0.02
    scale_swap_prob: float = 0.0
    threshold: float = 0.05
    mode: str = "feature"
    image_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        object.__setattr__(self, "splits", tuple(int(s) for s in self.splits))
        if self.mode not in ("feature", "image"):
            raise ValueError(f"mode must be 'feature' or 'image', got {self.mode!r}")
        if len(self.splits) != 3:
            raise ValueError(f"splits must be (train, val, test), got {self.splits}")
        if sum(self.splits) != self.n_classes:
            raise ValueError(
                f"splits {self.splits} do not sum to n_classes {self.n_classes}"
            )
        if self.bank_size < self.k_parts:
            raise ValueError(
                f"bank_size {self.bank_size} is too small for {self.k_parts} parts"
            )
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if min(self.noise_sigma, self.loc_sigma, self.coef_sigma) < 0:
            raise ValueError("jitter and noise settings must be >= 0")
        if not 0.0 <= self.scale_swap_prob <= 1.0:
            raise ValueError("scale_swap_prob must be in [0, 1]")
        if self.channels < self.k_parts * len(self.scales):
            raise ValueError(
                f"{self.channels} channels cannot give {self.k_parts} parts "
                f"one private channel per scale"
            )
        if self.mode == "image" and self.image_size % self.grid != 0:
            raise ValueError(
                f"image size {self.image_size} is not a multiple of grid {self.grid}"
            )
        # reuse the parser-side checks on scales vs grid
        ParserConfig(k_parts=self.k_parts, channels=self.channels,
                     grid=self.grid, scales=self.scales)

    @property
    def margin(self) -> int:
        return max(self.scales) // 2

    @property
    def min_separation(self) -> int:
        return max(self.scales)


@dataclass
class SyntheticClassSpec:
    """One class: canonical layout, signature, and its jitter profile.

    signature is (K, n_scales, C); entries are either 0 or at least the
    expression threshold.
    """

    class_id: int
    locations: np.ndarray
    signature: np.ndarray
    loc_sigma: float = 0.0
    coef_sigma: float = 0.0
    swap_prob: float = 0.0


@dataclass
class Sample:
    """One rendered sample with its planted ground truth."""

    data: np.ndarray
    class_id: int
    locations: np.ndarray
    expression: np.ndarray


@dataclass
class Episode:
    """Few-shot episode: class-aligned support and query sample lists."""

    class_ids: list
    support: list
    query: list


@dataclass
class SyntheticDataset:
    """Generated bank, class specs, split assignment, and sample pool."""

    config: SyntheticConfig
    seed: int
    bank: list
    assign: np.ndarray
    specs: list
    splits: dict
    samples: dict = field(default_factory=dict)

    def split_classes(self, split: str) -> list:
        if split not in self.splits:
            raise ValueError(f"unknown split {split!r}; expected one of {_SPLIT_NAMES}")
        return list(self.splits[split])

    def oracle_dictionary(self) -> PartDictionary:
        """Planted templates arranged as a parser dictionary."""
        from . import autodiff as ad
        kernels = []
        for si in range(len(self.config.scales)):
            per_scale = self.bank[si][self.assign]
            kernels.append(ad.tensor(per_scale.copy()))
        return PartDictionary(self.config.scales, kernels)

    def oracle_parser_config(self, **overrides) -> ParserConfig:
        """Parser settings that read expressions off exactly at cells."""
        base = dict(
            k_parts=self.config.k_parts,
            channels=self.config.channels,
            grid=self.config.grid,
            scales=self.config.scales,
            temperature=1e-3,
            threshold=self.config.threshold,
            sparsity=0.0,
            delta_variance=1e-6,
        )
        base.update(overrides)
        return ParserConfig(**base)


# -- generation --------------------------------------------------------


def _center_crop(kernel: np.ndarray, side: int) -> np.ndarray:
    full = kernel.shape[0]
    off = (full - side) // 2
    return kernel[off:off + side, off:off + side]


def _project_out(vec: np.ndarray, constraints: list) -> np.ndarray:
    """Remove the span of the constraint vectors (modified Gram-Schmidt)."""
    basis = []
    for c in constraints:
        u = c.astype(np.float64).copy()
        for b in basis:
            u -= (u @ b) * b
        norm = np.sqrt(u @ u)
        if norm > 1e-9:
            basis.append(u / norm)
    out = vec.copy()
    for b in basis:
        out -= (out @ b) * b
    return out


def _make_bank(config: SyntheticConfig, rng: np.random.Generator) -> list:
    """Unit-norm kernels per scale with exact cross-scale independence.

    For every bank column, kernels with side > 1 have zero mean and a
    zero center entry, and each smaller kernel is orthogonal to the
    center crops of the larger ones. Content planted at one scale then
    reads as exactly zero at every other scale of the same column.
    """
    scales = config.scales
    bank = [np.zeros((config.bank_size, s, s)) for s in scales]
    order = sorted(range(len(scales)), key=lambda i: -scales[i])
    for j in range(config.bank_size):
        built = {}
        for si in order:
            s = scales[si]
            if s == 1:
                built[s] = np.array([[1.0 if rng.random() < 0.5 else -1.0]])
                continue
            constraints = [np.ones(s * s), _one_hot_center(s)]
            for t, ker in built.items():
                if t > s:
                    constraints.append(_center_crop(ker, s).reshape(-1))
            for _ in range(20):
                draw = rng.standard_normal(s * s)
                flat = _project_out(draw, constraints)
                norm = np.sqrt(flat @ flat)
                if norm > 1e-6:
                    built[s] = (flat / norm).reshape(s, s)
                    break
            else:
                raise ValueError(f"could not draw an admissible scale-{s} kernel")
        for si, s in enumerate(scales):
            bank[si][j] = built[s]
    return bank


def _one_hot_center(side: int) -> np.ndarray:
    v = np.zeros(side * side)
    v[(side * side) // 2] = 1.0
    return v


def _layout_pool(config: SyntheticConfig, rng: np.random.Generator, need: int) -> list:
    lo = config.margin
    hi = config.grid - 1 - config.margin
    if hi < lo:
        raise ValueError(
            f"grid {config.grid} cannot hold kernels of scale {max(config.scales)}"
        )
    layouts = []
    seen = set()
    for _ in range(200000):
        pts = rng.integers(lo, hi + 1, size=(config.k_parts, 2))
        if _separated(pts, config.min_separation):
            key = tuple(map(tuple, pts))
            if key not in seen:
                seen.add(key)
                layouts.append(pts)
                if len(layouts) >= need:
                    break
    if not layouts:
        raise ValueError(
            f"infeasible separation: no {config.k_parts}-part layout with "
            f"pairwise distance >= {config.min_separation} fits grid {config.grid} "
            f"with margin {config.margin}"
        )
    return layouts


def _separated(points: np.ndarray, min_sep: int) -> bool:
    k = len(points)
    for i in range(k):
        for j in range(i + 1, k):
            if np.abs(points[i] - points[j]).max() < min_sep:
                return False
    return True


def _owned_channels(config: SyntheticConfig, part: int) -> np.ndarray:
    return np.arange(part, config.channels, config.k_parts)


def _draw_signature(config: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """(K, n_scales, C) coefficients: one slot per scale per part.

    Every part expresses every scale exactly once, each on a private
    channel drawn from the part's owned stripe.
    """
    n_scales = len(config.scales)
    sig = np.zeros((config.k_parts, n_scales, config.channels))
    for p in range(config.k_parts):
        owned = _owned_channels(config, p)
        chans = rng.choice(owned, size=n_scales, replace=False)
        for si, s in enumerate(config.scales):
            lo, hi = _COEF_RANGE_POINT if s == 1 else _COEF_RANGE_SHAPE
            sig[p, si, int(chans[si])] = rng.uniform(lo, hi)
    return sig


def _sibling_scale_indices(config: SyntheticConfig):
    """(far, near) scale indices for sibling shifts.

    None when the config has a single scale: one shifted slot per part
    cannot then produce two distinct siblings.
    """
    if len(config.scales) < 2:
        return None
    shape_idx = [i for i, s in enumerate(config.scales) if s > 1]
    far = shape_idx[-1] if shape_idx else len(config.scales) - 1
    near = shape_idx[0] if shape_idx else 0
    if near == far:
        near = 0 if far > 0 else 1
    return far, near


def _variant_signature(base: np.ndarray, axis: str,
                       config: SyntheticConfig) -> np.ndarray:
    """Shift one slot per part of a base signature to make a sibling.

    axis "far" shifts each part's slot at the largest scale, so the
    sibling pair is indistinguishable to any reader blind to that
    scale; axis "near" shifts the slots at the smallest shape scale
    (the point scale when there is no second shape scale).
    """
    sig = base.copy()
    far, near = _sibling_scale_indices(config)
    si = far if axis == "far" else near
    for p in range(config.k_parts):
        c = int(np.argwhere(sig[p, si] != 0.0)[0, 0])
        sig[p, si, c] = min(sig[p, si, c] + _SIBLING_SHIFT, _COEF_CAP)
    return sig


def _flat_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum((a - b) ** 2))


def _spec_ok(dataset: SyntheticDataset, spec: SyntheticClassSpec,
             rng: np.random.Generator, rivals: list) -> bool:
    """Probe-render the spec at sigma = 0 and demand exact recovery.

    Probes are feature-space renders even for image datasets. Half use
    the spec's own jitter profile and must parse back exactly; half
    disable scale swaps and must land closer to the spec's canonical
    signature than to any rival's by a margin.
    """
    pcfg = dataset.oracle_parser_config()
    dictionary = dataset.oracle_dictionary()
    config = dataset.config
    half = _PROBES_PER_CLASS // 2
    with no_grad():
        for probe in range(_PROBES_PER_CLASS):
            swap_override = None if probe < half else 0.0
            locs = _jittered_locations(config, spec, rng)
            sig = _jittered_signature(config, spec, rng, swap_override)
            phi = _render_features(dataset, locs, sig, rng, sigma=0.0)
            out = parse(phi, dictionary, pcfg)
            if not np.array_equal(out.hard_location, locs):
                return False
            flat = out.scores.data.reshape(config.k_parts, -1)
            top2 = np.partition(flat, -2, axis=1)[:, -2:]
            if np.any(top2[:, 1] - top2[:, 0] < _SCORE_MARGIN):
                return False
            if np.max(np.abs(out.expression.data - sig)) > 1e-7:
                return False
            if probe >= half:
                d_own = _flat_distance(sig, spec.signature)
                for rival in rivals:
                    if d_own + _RIVAL_MARGIN > _flat_distance(sig, rival):
                        return False
    return True


def generate_dataset(config: SyntheticConfig, seed: int) -> SyntheticDataset:
    """Generate bank, validated class specs, splits, and the sample pool.

    Deterministic in (config, seed). Classes come in families of three
    siblings sharing one layout (base, far-scale shift, near-scale
    shift) so that episodes contain confusable groups; every spec is
    rejected and redrawn until its zero-noise probe renders parse back
    exactly and keep a margin to all earlier classes. Single-scale
    configs cannot form distinct siblings and fall back to independent
    classes.
    """
    rng = derive_rng(seed, "bank")
    bank = _make_bank(config, rng)
    # distinct entries per channel keep one part's template from
    # matching another part's content outright
    assign = np.zeros((config.k_parts, config.channels), dtype=np.int64)
    for c in range(config.channels):
        assign[:, c] = rng.choice(config.bank_size, size=config.k_parts,
                                  replace=False)
    dataset = SyntheticDataset(config=config, seed=seed, bank=bank,
                               assign=assign, specs=[], splits={})

    layout_rng = derive_rng(seed, "layouts")
    layouts = _layout_pool(config, layout_rng, need=max(4 * config.n_classes, 64))

    specs = []
    signatures_seen = []
    base_sig = None
    family_layout = None
    families = _sibling_scale_indices(config) is not None
    for class_id in range(config.n_classes):
        member = class_id % 3 if families else 0
        crng = derive_rng(seed, "class", class_id)
        for attempt in range(_CLASS_ATTEMPTS):
            if member == 0 or base_sig is None:
                sig = _draw_signature(config, crng)
            elif member == 1:
                sig = _variant_signature(base_sig, "far", config)
            else:
                sig = _variant_signature(base_sig, "near", config)
            if any(_same_signature(sig, old) for old in signatures_seen):
                continue
            if member == 0:
                fam = class_id // 3
                layout = layouts[(fam * _CLASS_ATTEMPTS + attempt) % len(layouts)]
            else:
                layout = family_layout
            spec = SyntheticClassSpec(
                class_id=class_id, locations=layout.copy(), signature=sig,
                loc_sigma=config.loc_sigma, coef_sigma=config.coef_sigma,
                swap_prob=config.scale_swap_prob)
            if _spec_ok(dataset, spec, derive_rng(seed, "probe", class_id, attempt),
                        signatures_seen):
                break
        else:
            raise ValueError(f"could not build an unambiguous spec for class {class_id}")
        if member == 0:
            base_sig = sig
            family_layout = spec.locations
        signatures_seen.append(sig)
        specs.append(spec)
    dataset.specs = specs

    order = list(range(config.n_classes))
    bounds = np.cumsum(config.splits)
    dataset.splits = {
        "train": tuple(order[:bounds[0]]),
        "val": tuple(order[bounds[0]:bounds[1]]),
        "test": tuple(order[bounds[1]:bounds[2]]),
    }

    for spec in specs:
        pool = []
        for idx in range(config.samples_per_class):
            srng = derive_rng(seed, "sample", spec.class_id, idx)
            pool.append(_render(dataset, spec, srng, sigma=config.noise_sigma))
        dataset.samples[spec.class_id] = pool
    return dataset


def _same_signature(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and np.array_equal(a, b)


# -- rendering ---------------------------------------------------------


def render_sample(dataset: SyntheticDataset, class_id: int,
                  rng: np.random.Generator, sigma: float | None = None) -> Sample:
    """Render a fresh sample of one class; sigma None uses the config."""
    spec = dataset.specs[class_id]
    if spec.class_id != class_id:
        spec = next(s for s in dataset.specs if s.class_id == class_id)
    return _render(dataset, spec, rng,
                   sigma=dataset.config.noise_sigma if sigma is None else sigma)


def _jittered_locations(config: SyntheticConfig, spec: SyntheticClassSpec,
                        rng: np.random.Generator) -> np.ndarray:
    """Integer offsets from a discretized truncated Gaussian.

    Retries keep the jittered layout inside the kernel margin and
    pairwise separated, so rendered windows never overlap or clip.
    """
    if spec.loc_sigma == 0.0:
        return spec.locations.copy()
    lo, hi = config.margin, config.grid - 1 - config.margin
    lim = math.ceil(2.0 * spec.loc_sigma)
    for _ in range(100):
        offs = np.rint(rng.normal(0.0, spec.loc_sigma, size=spec.locations.shape))
        offs = np.clip(offs, -lim, lim).astype(np.int64)
        locs = spec.locations + offs
        if locs.min() >= lo and locs.max() <= hi and _separated(locs, config.min_separation):
            return locs
    return spec.locations.copy()


def _jittered_signature(config: SyntheticConfig, spec: SyntheticClassSpec,
                        rng: np.random.Generator,
                        swap_override: float | None = None) -> np.ndarray:
    """Coefficient jitter (truncated Gaussian) plus optional scale swaps.

    A swap re-renders one of a part's shape slots at a neighboring
    scale with the same coefficient and channel. The jitter floor
    keeps every active coefficient above the expression threshold.
    """
    sig = spec.signature.copy()
    floor = config.threshold + 0.05
    if spec.coef_sigma > 0.0:
        for p, si, c in np.argwhere(sig != 0.0):
            delta = float(np.clip(rng.normal(0.0, spec.coef_sigma),
                                  -2.0 * spec.coef_sigma, 2.0 * spec.coef_sigma))
            sig[p, si, c] = float(np.clip(sig[p, si, c] + delta, floor, _COEF_CAP))
    prob = spec.swap_prob if swap_override is None else swap_override
    if prob > 0.0 and len(config.scales) >= 2:
        shape_idx = [i for i, s in enumerate(config.scales) if s > 1]
        for p in range(config.k_parts):
            if rng.random() >= prob:
                continue
            slots = [(si, c) for si, c in np.argwhere(sig[p].astype(bool))
                     if si in shape_idx]
            if not slots:
                continue
            si, c = slots[rng.integers(len(slots))]
            neighbors = [t for t in (si - 1, si + 1)
                         if 0 <= t < len(config.scales) and sig[p, t, c] == 0.0]
            if not neighbors:
                continue
            ti = int(neighbors[rng.integers(len(neighbors))])
            sig[p, ti, c] = sig[p, si, c]
            sig[p, si, c] = 0.0
    return sig


def _render(dataset: SyntheticDataset, spec: SyntheticClassSpec,
            rng: np.random.Generator, sigma: float) -> Sample:
    config = dataset.config
    locs = _jittered_locations(config, spec, rng)
    sig = _jittered_signature(config, spec, rng)
    if config.mode == "feature":
        data = _render_features(dataset, locs, sig, rng, sigma)
    else:
        data = _render_image(dataset, locs, sig, rng, sigma)
    return Sample(data=data, class_id=spec.class_id,
                  locations=locs, expression=sig)


def _render_features(dataset, locs, sig, rng, sigma) -> np.ndarray:
    config = dataset.config
    g = config.grid
    phi = np.zeros((config.channels, g, g))
    for p, si, c in np.argwhere(sig != 0.0):
        s = config.scales[si]
        r = s // 2
        kernel = dataset.bank[si][dataset.assign[p, c]]
        lr, lc = locs[p]
        phi[c, lr - r:lr + r + 1, lc - r:lc + r + 1] += sig[p, si, c] * kernel
    if sigma > 0.0:
        phi += rng.normal(0.0, sigma, size=phi.shape)
    return phi.transpose(1, 2, 0)


def _render_image(dataset, locs, sig, rng, sigma) -> np.ndarray:
    config = dataset.config
    stride = config.image_size // config.grid
    image = np.zeros((config.image_size, config.image_size))
    for p, si, c in np.argwhere(sig != 0.0):
        s = config.scales[si]
        r = s // 2
        kernel = dataset.bank[si][dataset.assign[p, c]]
        patch = np.kron(kernel, np.ones((stride, stride)))
        top = (locs[p][0] - r) * stride
        left = (locs[p][1] - r) * stride
        image[top:top + s * stride, left:left + s * stride] += sig[p, si, c] * patch
    if sigma > 0.0:
        image += rng.normal(0.0, sigma, size=image.shape)
    return image[:, :, None]


# -- episodes ----------------------------------------------------------


def sample_episode(dataset: SyntheticDataset, split: str, n_way: int,
                   m_support: int, q_query: int, rng: np.random.Generator) -> Episode:
    """Draw one few-shot episode from a split's sample pool.

    Classes are drawn uniformly without replacement; each class's
    support and query samples are disjoint pool entries.
    """
    classes = dataset.split_classes(split)
    if len(classes) < n_way:
        raise ValueError(
            f"split {split!r} has {len(classes)} classes, episode needs {n_way}"
        )
    pool_size = dataset.config.samples_per_class
    if m_support + q_query > pool_size:
        raise ValueError(
            f"episode needs {m_support}+{q_query} samples per class, pool has {pool_size}"
        )
    picked = rng.choice(len(classes), size=n_way, replace=False)
    class_ids = [classes[i] for i in picked]
    support, query = [], []
    for cid in class_ids:
        idx = rng.choice(pool_size, size=m_support + q_query, replace=False)
        pool = dataset.samples[cid]
        support.append([pool[i] for i in idx[:m_support]])
        query.append([pool[i] for i in idx[m_support:]])
    return Episode(class_ids=class_ids, support=support, query=query)


# -- disk round-trip ---------------------------------------------------

_MANIFEST_HEADER = "dopm-dataset v1"


def save_dataset(dataset: SyntheticDataset, directory) -> None:
    """Write manifest, bank, and all pooled samples with sidecars."""
    d = Path(directory)
    (d / "samples").mkdir(parents=True, exist_ok=True)
    cfg = dataset.config
    lines = [_MANIFEST_HEADER, f"seed = {dataset.seed}"]
    for name in ("grid", "channels", "k_parts", "bank_size", "n_classes",
                 "samples_per_class", "image_size"):
        lines.append(f"config.{name} = {getattr(cfg, name)}")
    for name in ("noise_sigma", "loc_sigma", "coef_sigma", "scale_swap_prob",
                 "threshold"):
        lines.append(f"config.{name} = {float(getattr(cfg, name))!r}")
    lines.append(f"config.mode = {cfg.mode}")
    lines.append(f"config.scales = {','.join(str(s) for s in cfg.scales)}")
    lines.append(f"config.splits = {','.join(str(s) for s in cfg.splits)}")
    for split in _SPLIT_NAMES:
        ids = " ".join(str(c) for c in dataset.splits[split])
        lines.append(f"split {split} = {ids}")
    for spec in dataset.specs:
        flat = " ".join(str(int(v)) for v in spec.locations.reshape(-1))
        lines.append(f"layout {spec.class_id} = {flat}")
        lines.append(
            f"jitter {spec.class_id} = {float(spec.loc_sigma)!r} "
            f"{float(spec.coef_sigma)!r} {float(spec.swap_prob)!r}"
        )
        for p, si, c in np.argwhere(spec.signature != 0.0):
            lines.append(
                f"sig {spec.class_id} {p} {si} {c} = {float(spec.signature[p, si, c])!r}"
            )
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    tensorio.write_records(d / "bank.dopt", dataset.bank)
    tensorio.write_tensor(d / "assign.dopt", dataset.assign.astype(np.float64))
    for cid, pool in dataset.samples.items():
        for idx, sample in enumerate(pool):
            stem = d / "samples" / f"c{cid:03d}_s{idx:03d}"
            tensorio.write_tensor(f"{stem}.dopt", sample.data)
            _write_sidecar(f"{stem}.gt.txt", sample)


def _write_sidecar(path, sample: Sample) -> None:
    lines = [f"class = {sample.class_id}"]
    for p, (r, c) in enumerate(sample.locations):
        lines.append(f"loc {p} = {int(r)} {int(c)}")
    for p, si, c in np.argwhere(sample.expression != 0.0):
        lines.append(f"z {p} {si} {c} = {float(sample.expression[p, si, c])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(directory) -> SyntheticDataset:
    """Rebuild a dataset (config, specs, pool) from its directory."""
    d = Path(directory)
    text = (d / "manifest.txt").read_text().splitlines()
    if not text or text[0] != _MANIFEST_HEADER:
        raise ValueError(f"not a dataset manifest: {d / 'manifest.txt'}")
    cfg_kv = {}
    seed = 0
    splits = {}
    layouts = {}
    jitters = {}
    sigs = {}
    for line in text[1:]:
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "seed":
            seed = int(value)
        elif key.startswith("config."):
            cfg_kv[key[7:]] = value
        elif key.startswith("split "):
            splits[key.split()[1]] = tuple(int(v) for v in value.split())
        elif key.startswith("layout "):
            cid = int(key.split()[1])
            vals = [int(v) for v in value.split()]
            layouts[cid] = np.asarray(vals).reshape(-1, 2)
        elif key.startswith("jitter "):
            cid = int(key.split()[1])
            jitters[cid] = tuple(float(v) for v in value.split())
        elif key.startswith("sig "):
            _, cid, p, si, c = key.split()
            sigs.setdefault(int(cid), []).append((int(p), int(si), int(c), float(value)))
        else:
            raise ValueError(f"unrecognized manifest line: {line!r}")
    config = SyntheticConfig(
        grid=int(cfg_kv["grid"]),
        channels=int(cfg_kv["channels"]),
        k_parts=int(cfg_kv["k_parts"]),
        scales=tuple(int(s) for s in cfg_kv["scales"].split(",")),
        bank_size=int(cfg_kv["bank_size"]),
        n_classes=int(cfg_kv["n_classes"]),
        splits=tuple(int(s) for s in cfg_kv["splits"].split(",")),
        samples_per_class=int(cfg_kv["samples_per_class"]),
        noise_sigma=float(cfg_kv["noise_sigma"]),
        loc_sigma=float(cfg_kv["loc_sigma"]),
        coef_sigma=float(cfg_kv["coef_sigma"]),
        scale_swap_prob=float(cfg_kv["scale_swap_prob"]),
        threshold=float(cfg_kv["threshold"]),
        mode=cfg_kv["mode"],
        image_size=int(cfg_kv["image_size"]),
    )
    bank = tensorio.read_records(d / "bank.dopt")
    assign = tensorio.read_tensor(d / "assign.dopt").astype(np.int64)
    specs = []
    n_scales = len(config.scales)
    for cid in range(config.n_classes):
        sig = np.zeros((config.k_parts, n_scales, config.channels))
        for p, si, c, v in sigs.get(cid, []):
            sig[p, si, c] = v
        jl, jc, js = jitters.get(
            cid, (config.loc_sigma, config.coef_sigma, config.scale_swap_prob))
        specs.append(SyntheticClassSpec(
            class_id=cid, locations=layouts[cid], signature=sig,
            loc_sigma=jl, coef_sigma=jc, swap_prob=js))
    dataset = SyntheticDataset(config=config, seed=seed, bank=bank,
                               assign=assign, specs=specs, splits=splits)
    for cid in range(config.n_classes):
        pool = []
        for idx in range(config.samples_per_class):
            stem = d / "samples" / f"c{cid:03d}_s{idx:03d}"
            data = tensorio.read_tensor(f"{stem}.dopt")
            locs, expr = _read_sidecar(f"{stem}.gt.txt", config)
            pool.append(Sample(data=data, class_id=cid, locations=locs,
                               expression=expr))
        dataset.samples[cid] = pool
    return dataset


def _read_sidecar(path, config: SyntheticConfig):
    locs = np.zeros((config.k_parts, 2), dtype=np.int64)
    expr = np.zeros((config.k_parts, len(config.scales), config.channels))
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key.startswith("loc "):
            p = int(key.split()[1])
            locs[p] = [int(v) for v in value.split()]
        elif key.startswith("z "):
            _, p, si, c = key.split()
            expr[int(p), int(si), int(c)] = float(value)
    return locs, expr
