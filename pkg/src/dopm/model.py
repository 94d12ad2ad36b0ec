"""Model assembly: parameters, variant forward passes, checkpoints.

Three variants share one training and evaluation harness. "dopm" is
the full pipeline: parse each sample into located, thresholded part
expressions and match with the entropy-reweighted part distance.
"baseline1" replaces parsing entirely by global average pooling with a
linear projection and prototype matching. "baseline2" keeps the
location machinery but matches probability-pooled raw features instead
of dictionary expressions.

Feature-mode models consume (G, G, C) maps directly; attaching a
backbone config makes the model consume images instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import matcher, tensorio
from .autodiff import Tensor
from .parsing import ParserConfig, PartDictionary, parse
from .seeding import derive_rng

VARIANTS = ("dopm", "baseline1", "baseline2")


@dataclass(frozen=True)
class ModelConfig:
    """Variant choice plus every size the parameters depend on."""

    parser: ParserConfig
    variant: str = "dopm"
    support_size: int = 1
    use_rho: bool = True
    use_alpha: bool = True
    beta: float = 0.01
    backbone: bb.BackboneConfig | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.support_size < 1:
            raise ValueError(f"support_size must be >= 1, got {self.support_size}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.backbone is not None:
            if self.backbone.channels != self.parser.channels:
                raise ValueError(
                    f"backbone emits {self.backbone.channels} channels, parser "
                    f"expects {self.parser.channels}"
                )
            if self.backbone.grid != self.parser.grid:
                raise ValueError(
                    f"backbone grid {self.backbone.grid} differs from parser "
                    f"grid {self.parser.grid}"
                )


@dataclass
class PooledParse:
    """Parse-shaped record whose expression is pooled raw features."""

    expression: Tensor
    entropy: Tensor
    location: Tensor
    distribution: Tensor


@dataclass
class GapFeature:
    """Projected global-average feature of one sample."""

    vector: Tensor


@dataclass
class EpisodeResult:
    """Losses and diagnostics of one episode forward pass."""

    loss_dis: Tensor
    loss_div: Tensor | None
    predictions: np.ndarray
    distances: np.ndarray

    @property
    def accuracy(self) -> float:
        n_classes = self.distances.shape[1]
        per_class = len(self.predictions) // n_classes
        truth = np.repeat(np.arange(n_classes), per_class)
        return float(np.mean(self.predictions == truth))


class Model:
    """Parameter container with variant-dispatched episode forwards."""

    def __init__(self, config: ModelConfig, dictionary: PartDictionary | None,
                 reweight: matcher.ReweightParams | None,
                 projection: Tensor | None, backbone_params: list | None):
        self.config = config
        self.dictionary = dictionary
        self.reweight = reweight
        self.projection = projection
        self.backbone_params = backbone_params

    def parameters(self) -> list:
        out = []
        if self.backbone_params is not None:
            out.extend(self.backbone_params)
        if self.dictionary is not None:
            out.extend(self.dictionary.parameters())
        if self.reweight is not None:
            out.extend(self.reweight.parameters())
        if self.projection is not None:
            out.append(self.projection)
        return out

    def named_arrays(self) -> dict:
        out = {}
        if self.backbone_params is not None:
            out.update(bb.named_parameters(self.backbone_params))
        if self.dictionary is not None:
            for si, kern in enumerate(self.dictionary.kernels):
                out[f"dictionary.scale{si}"] = kern.data
        if self.reweight is not None:
            out["reweight.rho_weight"] = np.asarray(self.reweight.rho_weight.data)
            out["reweight.rho_bias"] = np.asarray(self.reweight.rho_bias.data)
            out["reweight.alpha_weight"] = self.reweight.alpha_weight.data
            out["reweight.alpha_bias"] = np.asarray(self.reweight.alpha_bias.data)
        if self.projection is not None:
            out["projection.weight"] = self.projection.data
        return out

    def reseed_degenerate(self, rng: np.random.Generator) -> int:
        if self.dictionary is None:
            return 0
        return self.dictionary.reseed_degenerate(rng)

    # -- per-sample forwards --------------------------------------------

    def features(self, data) -> Tensor:
        """(G, G, C) feature tensor for one sample's stored data."""
        if self.backbone_params is not None:
            return bb.extract_features(data, self.backbone_params, self.config.backbone)
        t = data if isinstance(data, Tensor) else ad.tensor(data)
        p = self.config.parser
        expected = (p.grid, p.grid, p.channels)
        if t.data.shape != expected:
            raise ValueError(
                f"sample shape {t.data.shape} does not match parser {expected}; "
                f"image datasets need a backbone config"
            )
        return t

    def parse_sample(self, data):
        """Variant-shaped parse record for one sample."""
        phi = self.features(data)
        cfg = self.config
        if cfg.variant == "baseline1":
            gap = ad.mean(phi, axis=(0, 1))
            return GapFeature(vector=self.projection @ gap)
        out = parse(phi, self.dictionary, cfg.parser)
        if cfg.variant == "baseline2":
            pooled = _pooled_expression(phi, out.distribution)
            return PooledParse(expression=pooled, entropy=out.entropy,
                               location=out.location, distribution=out.distribution)
        return out

    # -- episode forward -------------------------------------------------

    def episode_result(self, episode, eta: float) -> EpisodeResult:
        """Losses, predictions, and distances for one episode.

        eta = 0 switches the divergence term off entirely; otherwise it
        sums the peakedness-plus-overlap penalty over every support and
        query sample.
        """
        support = [[self.parse_sample(s.data) for s in row] for row in episode.support]
        query = [[self.parse_sample(s.data) for s in row] for row in episode.query]
        if self.config.variant == "baseline1":
            loss, preds, dmat = _prototype_loss(support, query)
            return EpisodeResult(loss, None, preds, dmat)
        loss, preds, dmat = matcher.episode_loss(
            support, query, self.reweight, beta=self.config.beta,
            grid=self.config.parser.grid, use_rho=self.config.use_rho,
            use_alpha=self.config.use_alpha)
        loss_div = None
        if eta != 0.0:
            for row in support + query:
                for rec in row:
                    term = matcher.divergence_loss(rec.distribution, eta)
                    loss_div = term if loss_div is None else loss_div + term
        return EpisodeResult(loss, loss_div, preds, dmat)

    def explain_episode(self, episode) -> list:
        """Per-query distance breakdowns against every class.

        Returns one record per query in class-major order:
        (true_index, predicted_index, [DistanceBreakdown per class]).
        """
        if self.config.variant == "baseline1":
            raise ValueError("distance breakdowns need a parsing variant")
        cfg = self.config
        support = [[self.parse_sample(s.data) for s in row] for row in episode.support]
        classes = [matcher.fuse_support(row, self.reweight, cfg.parser.grid,
                                        use_rho=cfg.use_rho) for row in support]
        records = []
        for true_idx, row in enumerate(episode.query):
            for sample in row:
                qp = self.parse_sample(sample.data)
                dists, breakdowns = matcher.query_distances(
                    qp, classes, self.reweight, cfg.beta, cfg.parser.grid,
                    use_alpha=cfg.use_alpha, want_breakdown=True)
                records.append((true_idx, int(dists.data.argmin()), breakdowns))
        return records


def _pooled_expression(phi: Tensor, distribution: Tensor) -> Tensor:
    """Probability-weighted average of the feature map per part.

    phi is (G, G, C), distribution (K, G, G); returns (K, C).
    """
    k, g = distribution.data.shape[0], distribution.data.shape[1]
    feats = []
    for p in range(k):
        w = ad.reshape(distribution[p], (g, g, 1))
        feats.append((w * phi).sum(axis=(0, 1)))
    return ad.stack(feats, axis=0)


def _prototype_loss(support: list, query: list):
    """Mean-prototype squared-distance episode loss for baseline1."""
    protos = []
    for row in support:
        stacked = ad.stack([r.vector for r in row], axis=0)
        protos.append(ad.mean(stacked, axis=0))
    loss = None
    preds = []
    rows = []
    for true_idx, row in enumerate(query):
        for rec in row:
            dists = []
            for proto in protos:
                diff = rec.vector - proto
                dists.append((diff * diff).sum())
            dvec = ad.stack(dists)
            term = matcher._neg_log_posterior(dvec, true_idx)
            loss = term if loss is None else loss + term
            preds.append(int(dvec.data.argmin()))
            rows.append(dvec.data.copy())
    return loss, np.asarray(preds), np.asarray(rows)


def build_model(config: ModelConfig, seed: int) -> Model:
    """Fresh parameters for a variant, deterministic in the seed."""
    dictionary = None
    reweight = None
    projection = None
    backbone_params = None
    if config.backbone is not None:
        backbone_params = bb.init_backbone(config.backbone, derive_rng(seed, "backbone"))
    if config.variant == "baseline1":
        # identity start: plain average-pool prototypes before training
        projection = ad.parameter(np.eye(config.parser.channels))
    else:
        dictionary = PartDictionary.init_random(config.parser,
                                                derive_rng(seed, "dictionary"))
        reweight = matcher.ReweightParams.init(config.support_size)
    return Model(config, dictionary, reweight, projection, backbone_params)


# -- checkpoints ---------------------------------------------------------


def _meta_dict(config: ModelConfig) -> dict:
    p = config.parser
    meta = {
        "variant": config.variant,
        "support_size": config.support_size,
        "use_rho": int(config.use_rho),
        "use_alpha": int(config.use_alpha),
        "beta": float(config.beta),
        "parser.k_parts": p.k_parts,
        "parser.channels": p.channels,
        "parser.grid": p.grid,
        "parser.scales": ",".join(str(s) for s in p.scales),
        "parser.temperature": float(p.temperature),
        "parser.threshold": float(p.threshold),
        "parser.sparsity": float(p.sparsity),
        "parser.delta_variance": float(p.delta_variance),
    }
    if config.backbone is not None:
        b = config.backbone
        meta["backbone.input_size"] = b.input_size
        meta["backbone.input_channels"] = b.input_channels
        meta["backbone.widths"] = ",".join(str(w) for w in b.widths)
        meta["backbone.grid"] = b.grid
    return meta


def config_from_meta(meta: dict) -> ModelConfig:
    parser = ParserConfig(
        k_parts=int(meta["parser.k_parts"]),
        channels=int(meta["parser.channels"]),
        grid=int(meta["parser.grid"]),
        scales=tuple(int(s) for s in meta["parser.scales"].split(",")),
        temperature=float(meta["parser.temperature"]),
        threshold=float(meta["parser.threshold"]),
        sparsity=float(meta["parser.sparsity"]),
        delta_variance=float(meta["parser.delta_variance"]),
    )
    backbone_cfg = None
    if "backbone.widths" in meta:
        backbone_cfg = bb.BackboneConfig(
            input_size=int(meta["backbone.input_size"]),
            input_channels=int(meta["backbone.input_channels"]),
            widths=tuple(int(w) for w in meta["backbone.widths"].split(",")),
            grid=int(meta["backbone.grid"]),
        )
    return ModelConfig(
        parser=parser,
        variant=meta["variant"],
        support_size=int(meta["support_size"]),
        use_rho=bool(int(meta["use_rho"])),
        use_alpha=bool(int(meta["use_alpha"])),
        beta=float(meta["beta"]),
        backbone=backbone_cfg,
    )


def save_model(model: Model, directory) -> None:
    tensorio.save_checkpoint(directory, model.named_arrays(), _meta_dict(model.config))


def load_model(directory) -> Model:
    arrays, meta = tensorio.load_checkpoint(directory)
    config = config_from_meta(meta)
    dictionary = None
    reweight = None
    projection = None
    backbone_params = None
    if config.backbone is not None:
        backbone_params = []
        for stage in range(len(config.backbone.widths)):
            backbone_params.append(ad.parameter(arrays[f"backbone.{stage}.kernel"]))
            backbone_params.append(ad.parameter(arrays[f"backbone.{stage}.bias"]))
    if config.variant == "baseline1":
        projection = ad.parameter(arrays["projection.weight"])
    else:
        kernels = []
        for si in range(len(config.parser.scales)):
            kernels.append(ad.parameter(arrays[f"dictionary.scale{si}"]))
        dictionary = PartDictionary(config.parser.scales, kernels)
        reweight = matcher.ReweightParams(
            rho_weight=ad.parameter(arrays["reweight.rho_weight"]),
            rho_bias=ad.parameter(arrays["reweight.rho_bias"]),
            alpha_weight=ad.parameter(arrays["reweight.alpha_weight"]),
            alpha_bias=ad.parameter(arrays["reweight.alpha_bias"]),
        )
    return Model(config, dictionary, reweight, projection, backbone_params)
