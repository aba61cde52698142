"""Model assembly: three-stage architecture, builders, complexity accounting.

A network is three stages plus a head. The backbone abstracts the cloud
through L levels of set abstraction (the last one global). The
cross-referencing stage walks back down: starting from the global feature it
repeatedly concatenates same-level backbone features, transforms them with a
channel-reduction residual, and upsamples. The re-encoding stage walks up
again over the concatenation of all three stages' same-level features with
identity residuals, downsampling through the backbone's own sampled centers,
and ends in a global feature for classification. Dense prediction appends
feature-propagation levels that decode back to every input point, with a
raw-attribute skip at the finest level.

Builders:
    * ``classifier_config``: multi-scale classifier (about 1.17M parameters
      at 2 groups, 40 classes).
    * ``segmenter_config``: the same trunk with 4 propagation levels.
    * ``lite_config``: single-scale lightweight classifier (about 0.70M).
    * ``scaled_classifier_config``: variable backbone depth (3 to 6 levels)
      for capacity sweeps; depth 4 reproduces ``classifier_config``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import pointops as po
from .layers import (
    CrossReference,
    DenseHead,
    FeaturePropagation,
    LevelState,
    ReEncode,
    SetAbstraction,
    effective_groups,
)

__all__ = [
    "SASpec",
    "FCRSpec",
    "FRESpec",
    "FPSpec",
    "FCSpec",
    "ModelConfig",
    "classifier_config",
    "segmenter_config",
    "lite_config",
    "scaled_classifier_config",
    "Model",
    "TrunkTrace",
    "LayerCost",
    "ComplexityReport",
    "complexity",
]


@dataclass
class SASpec:
    in_channels: int
    radii: "list[float] | None"  # None -> global layer
    samples: "list[int] | None"
    widths: list[list[int]]  # one list per branch
    out_points: "int | None"


@dataclass
class FCRSpec:
    in_channels: int  # concatenated width
    widths: list[int]


@dataclass
class FRESpec:
    in_channels: int
    radius: "float | None"  # None -> global pooling
    samples: "int | None"
    widths: list[int]


@dataclass
class FPSpec:
    in_channels: int
    widths: list[int]


@dataclass
class FCSpec:
    in_channels: int
    out_channels: int
    dropout: float


@dataclass
class ModelConfig:
    """Complete, JSON-serializable architecture description."""

    task: str  # "classification" | "segmentation"
    n_outputs: int  # classes or part categories
    n_groups: int
    backbone: list[SASpec]
    cross_reference: list[FCRSpec]
    re_encode: list[FRESpec]
    propagation: list[FPSpec] = field(default_factory=list)
    head: list[FCSpec] = field(default_factory=list)
    use_residual: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            task=d["task"],
            n_outputs=d["n_outputs"],
            n_groups=d["n_groups"],
            backbone=[SASpec(**s) for s in d["backbone"]],
            cross_reference=[FCRSpec(**s) for s in d["cross_reference"]],
            re_encode=[FRESpec(**s) for s in d["re_encode"]],
            propagation=[FPSpec(**s) for s in d.get("propagation", [])],
            head=[FCSpec(**s) for s in d.get("head", [])],
            use_residual=d.get("use_residual", True),
        )


def _validate(config: ModelConfig) -> None:
    if config.task not in ("classification", "segmentation"):
        raise ad.ConfigError(f"unknown task {config.task!r}")
    if config.n_outputs < 2:
        raise ad.ConfigError("n_outputs must be >= 2")
    if config.n_groups < 1:
        raise ad.ConfigError("n_groups must be >= 1")
    depth = len(config.backbone)
    if depth < 2:
        raise ad.ConfigError("backbone needs at least 2 levels (one local, one global)")
    if config.backbone[-1].radii is not None:
        raise ad.ConfigError("the last backbone level must be global (radii=None)")
    n_local = depth - 1
    if len(config.cross_reference) != n_local or len(config.re_encode) != n_local:
        raise ad.ConfigError(
            f"need {n_local} cross-reference and re-encode levels for a "
            f"{depth}-level backbone, got {len(config.cross_reference)}/{len(config.re_encode)}"
        )
    if config.task == "segmentation" and not config.propagation:
        raise ad.ConfigError("segmentation needs propagation levels")
    if not config.head or config.head[-1].out_channels != config.n_outputs:
        raise ad.ConfigError("head must end in a layer with n_outputs channels")


# ---------------------------------------------------------------------------
# Builders.

# Per-level multi-scale grouping geometry for the scaled family; depth 4
# reproduces the reference classifier.
_MSG_RADII = {1: [0.1, 0.2, 0.4], 2: [0.2, 0.4, 0.6], 3: [0.6, 0.8, 0.9], 4: [0.8, 1.0, 1.2], 5: [1.0, 1.2, 1.4]}
_MSG_SAMPLES = {1: [16, 32, 128], 2: [32, 64, 128], 3: [64, 96, 128], 4: [64, 96, 128], 5: [64, 96, 128]}
_POINT_CHAIN = [512, 128, 32, 8, 2]
_FRE_RADII = [0.4, 0.8, 1.2, 1.6]


def _trunk_specs(depth: int):
    """Backbone/cross-reference/re-encode specs for a given backbone depth."""
    if not 3 <= depth + 1 <= 6:
        raise ad.ConfigError(f"supported backbone depths are 3..6 levels, got {depth + 1}")
    backbone = []
    widths = []
    c = 0
    for level in range(1, depth + 1):
        w = 64 * 2 ** (level - 1)
        quarter, half = w // 4, w // 2
        backbone.append(
            SASpec(
                in_channels=c,
                radii=_MSG_RADII[level],
                samples=_MSG_SAMPLES[level],
                widths=[[quarter] * 3, [quarter] * 3, [half] * 3],
                out_points=_POINT_CHAIN[level - 1],
            )
        )
        widths.append(w)
        c = w
    backbone.append(SASpec(in_channels=c, radii=None, samples=None, widths=[[c]], out_points=None))
    widths.append(c)

    fcr = []
    prev = widths[-1]
    for j in range(depth):
        out = widths[-1] // 2 ** (j + 1)
        cat = prev if j == 0 else prev + widths[depth - j]
        fcr.append(FCRSpec(in_channels=cat, widths=[out, out]))
        prev = out

    fre = []
    prev = fcr[-1].widths[-1]
    for j in range(depth):
        cat = prev + widths[j] + (0 if j == 0 else fcr[depth - 1 - j].widths[-1])
        is_global = j == depth - 1
        fre.append(
            FRESpec(
                in_channels=cat,
                radius=None if is_global else _FRE_RADII[j],
                samples=None if is_global else 32,
                widths=[cat, cat],
            )
        )
        prev = cat
    return backbone, fcr, fre


def classifier_config(n_classes: int = 40, n_groups: int = 2, use_residual: bool = True) -> ModelConfig:
    """Multi-scale 4-level classifier."""
    backbone, fcr, fre = _trunk_specs(3)
    head_in = fre[-1].widths[-1]
    return ModelConfig(
        task="classification",
        n_outputs=n_classes,
        n_groups=n_groups,
        backbone=backbone,
        cross_reference=fcr,
        re_encode=fre,
        head=[
            FCSpec(head_in, 512, 0.4),
            FCSpec(512, 256, 0.5),
            FCSpec(256, n_classes, 0.0),
        ],
        use_residual=use_residual,
    )


def scaled_classifier_config(
    n_levels: int, n_classes: int = 40, n_groups: int = 2, use_residual: bool = True
) -> ModelConfig:
    """Classifier with a variable-depth backbone (3..6 levels including the
    global one); 4 levels reproduce ``classifier_config``."""
    backbone, fcr, fre = _trunk_specs(n_levels - 1)
    head_in = fre[-1].widths[-1]
    return ModelConfig(
        task="classification",
        n_outputs=n_classes,
        n_groups=n_groups,
        backbone=backbone,
        cross_reference=fcr,
        re_encode=fre,
        head=[
            FCSpec(head_in, 512, 0.4),
            FCSpec(512, 256, 0.5),
            FCSpec(256, n_classes, 0.0),
        ],
        use_residual=use_residual,
    )


def segmenter_config(n_parts: int, n_groups: int = 2, use_residual: bool = True) -> ModelConfig:
    """Part segmenter: classifier trunk + 4 propagation levels decoding back
    to every input point, with a raw-attribute skip at the finest level."""
    backbone, fcr, fre = _trunk_specs(3)
    fre_w = [s.widths[-1] for s in fre]  # 96, 288, 672
    fcr_w = [s.widths[-1] for s in fcr]
    propagation = [
        FPSpec(in_channels=fre_w[2] + fre_w[1], widths=[256, 256]),
        FPSpec(in_channels=256 + fre_w[0], widths=[256, 128]),
        FPSpec(in_channels=128 + fcr_w[2], widths=[128, 128]),
        FPSpec(in_channels=128 + 6, widths=[128, 128]),
    ]
    return ModelConfig(
        task="segmentation",
        n_outputs=n_parts,
        n_groups=n_groups,
        backbone=backbone,
        cross_reference=fcr,
        re_encode=fre,
        propagation=propagation,
        head=[FCSpec(128, 128, 0.5), FCSpec(128, n_parts, 0.0)],
        use_residual=use_residual,
    )


def lite_config(n_classes: int = 40, n_groups: int = 2, use_residual: bool = True) -> ModelConfig:
    """Single-scale lightweight classifier (about 0.70M parameters)."""
    backbone = [
        SASpec(0, [0.2], [32], [[32, 32, 32]], 512),
        SASpec(32, [0.4], [32], [[64, 64, 64]], 128),
        SASpec(64, [0.8], [32], [[128, 128, 128]], 32),
        SASpec(128, None, None, [[256]], None),
    ]
    fcr = [
        FCRSpec(256, [128, 128]),
        FCRSpec(128 + 128, [64, 64]),
        FCRSpec(64 + 64, [32, 32]),
    ]
    fre = [
        FRESpec(32 + 32, 0.4, 32, [64, 64]),
        FRESpec(64 + 64 + 64, 0.8, 32, [192, 192]),
        FRESpec(192 + 128 + 128, None, None, [448, 448]),
    ]
    return ModelConfig(
        task="classification",
        n_outputs=n_classes,
        n_groups=n_groups,
        backbone=backbone,
        cross_reference=fcr,
        re_encode=fre,
        head=[
            FCSpec(448, 512, 0.4),
            FCSpec(512, 256, 0.5),
            FCSpec(256, n_classes, 0.0),
        ],
        use_residual=use_residual,
    )


# ---------------------------------------------------------------------------


@dataclass
class TrunkTrace:
    """Intermediate states of one forward pass, finest to coarsest per stage."""

    bb: list[LevelState]  # index 0 is the raw input level
    fcr: list[LevelState]
    fre: list[LevelState]
    attrs: ad.Tensor  # (n, 6) [xyz | normals] input attribute tensor
    fp_feats: "list[ad.Tensor]" = field(default_factory=list)
    fallback_centers: int = 0

    def shapes(self) -> list[tuple[str, int, int, int]]:
        """(stage, level, channels, points) for every non-input state."""
        out = []
        for s in self.bb[1:] + self.fcr + self.fre:
            out.append((s.stage, s.level, s.channels, s.n_points))
        return out

    @property
    def global_feats(self) -> ad.Tensor:
        return self.fre[-1].feats


class Model:
    """A built network: parameters, buffers, and forward passes.

    Args:
        config: architecture description; validated on construction.
        seed: initialization stream seed.
        dtype: float32 for training, float64 for gradient checks.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        _validate(config)
        self.config = config
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        g = config.n_groups
        res = config.use_residual

        self.backbone = []
        for i, s in enumerate(config.backbone):
            self.backbone.append(
                SetAbstraction(
                    f"bb{i + 1}", s.in_channels, s.radii, s.samples, s.widths, s.out_points,
                    g, rng, dtype, residual=res,
                )
            )
        self.cross_reference = [
            CrossReference(f"fcr{i + 1}", s.in_channels, s.widths, g, rng, dtype, residual=res)
            for i, s in enumerate(config.cross_reference)
        ]
        self.re_encode = [
            ReEncode(
                f"fre{i + 1}", s.in_channels, s.widths, s.radius, s.samples, g, rng, dtype,
                residual=res,
            )
            for i, s in enumerate(config.re_encode)
        ]
        self.propagation = [
            FeaturePropagation(f"fp{i + 1}", s.in_channels, s.widths, rng, dtype)
            for i, s in enumerate(config.propagation)
        ]
        self.head = DenseHead(
            "fc",
            config.head[0].in_channels,
            [s.out_channels for s in config.head],
            [s.dropout for s in config.head],
            rng,
            dtype,
        )
        self._check_chain()

    def _check_chain(self) -> None:
        """Validate that configured widths compose, naming the failing layer."""
        cfg = self.config
        c = 0
        for i, (layer, s) in enumerate(zip(self.backbone, cfg.backbone)):
            if s.in_channels != c:
                raise ad.ConfigError(f"bb{i + 1}: expects {s.in_channels} channels, chain gives {c}")
            c = layer.out_channels
        bb_w = [s_.out_channels for s_ in self.backbone]  # per level 1..L
        depth = len(bb_w) - 1
        prev = bb_w[-1]
        for j, layer in enumerate(self.cross_reference):
            cat = prev if j == 0 else prev + bb_w[depth - j]
            if layer.in_channels != cat:
                raise ad.ConfigError(f"fcr{j + 1}: expects {layer.in_channels} channels, chain gives {cat}")
            prev = layer.out_channels
        fcr_w = [l.out_channels for l in self.cross_reference]
        prev = fcr_w[-1]
        for j, layer in enumerate(self.re_encode):
            cat = prev + bb_w[j] + (0 if j == 0 else fcr_w[depth - 1 - j])
            if layer.in_channels != cat:
                raise ad.ConfigError(f"fre{j + 1}: expects {layer.in_channels} channels, chain gives {cat}")
            prev = layer.out_channels

    # -- parameter access ---------------------------------------------------

    def stage_layers(self):
        return [*self.backbone, *self.cross_reference, *self.re_encode, *self.propagation]

    def parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        for layer in self.stage_layers():
            out.update(layer.parameters())
        out.update(self.head.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.stage_layers():
            out.update(layer.buffers())
        out.update(self.head.buffers())
        return out

    def n_parameters(self) -> int:
        return sum(int(p.data.size) for p in self.parameters().values())

    def set_bn_bypass(self, flag: bool) -> None:
        """Replace every batch norm with the identity (test instrumentation)."""
        for layer in self.backbone:
            for b in layer.branches:
                b.bn_bypass = flag
        for layer in [*self.cross_reference, *self.re_encode]:
            layer.mlp.bn_bypass = flag
        for layer in self.propagation:
            layer.bn_bypass = flag
        self.head.bn_bypass = flag

    def zero_transform_params(self) -> None:
        """Zero all stage transform weights and biases; the head keeps its
        initialization (test instrumentation for gradient-flow checks)."""
        for layer in self.backbone:
            for b in layer.branches:
                b.zero_transform()
        for layer in [*self.cross_reference, *self.re_encode]:
            layer.mlp.zero_transform()
        for layer in self.propagation:
            layer.mlp.zero_transform()

    # -- forward passes -----------------------------------------------------

    def _input_state(self, positions, normals, requires_grad: bool):
        pts = np.asarray(positions, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ad.ConfigError(f"positions must be (n, 3), got {pts.shape}")
        nrm = np.asarray(normals, dtype=np.float64)
        if nrm.shape != pts.shape:
            raise ad.ConfigError(f"normals shape {nrm.shape} does not match positions {pts.shape}")
        # Positions feed the non-differentiable index paths; the xyz channels
        # gathered into features are a leaf that never requires grad.
        attrs_xyz = ad.Tensor(pts.astype(self.dtype), requires_grad=False)
        attrs_nrm = ad.Tensor(nrm.astype(self.dtype), requires_grad=requires_grad)
        state = LevelState("bb", 0, pts, None, np.arange(pts.shape[0]))
        return state, attrs_xyz, attrs_nrm

    def trunk(
        self,
        positions: np.ndarray,
        normals: np.ndarray,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        input_requires_grad: bool = False,
    ) -> TrunkTrace:
        """Run backbone, cross-referencing and re-encoding on one cloud.

        Args:
            mode: "train" (batch statistics, random sampling start when an
                rng is given) or "eval" (running statistics, deterministic
                sampling).
            input_requires_grad: track gradients w.r.t. the normal channels.

        Returns:
            TrunkTrace with every level state; ``.global_feats`` is the
            (1, d) re-encoded global feature.
        """
        if mode not in ("train", "eval"):
            raise ad.ConfigError(f"unknown mode {mode!r}")
        state, attrs_xyz, attrs_nrm = self._input_state(positions, normals, input_requires_grad)
        attrs = ad.concat_channels([attrs_xyz, attrs_nrm])

        bb_states = [state]
        centers: list[np.ndarray | None] = []
        fallbacks = 0
        for layer in self.backbone:
            try:
                state, c = layer(state, attrs_xyz, attrs_nrm, mode, rng)
            except ad.NonFiniteError as e:
                raise ad.NonFiniteError(f"{layer.name}: {e}") from None
            bb_states.append(state)
            centers.append(c)
            fallbacks += layer.last_fallback_centers

        depth = len(self.backbone) - 1  # local levels
        # Cross-referencing walks from the global level back to level 1. At
        # step j the running state sits at level depth + 1 - j; it concats the
        # same-level backbone features (none at the global level) and lands
        # at level depth - j.
        fcr_states = []
        current = bb_states[-1]
        for j, layer in enumerate(self.cross_reference):
            same_bb = None if j == 0 else bb_states[depth + 1 - j]
            target = bb_states[depth - j]
            current = layer(current, same_bb, target, mode)
            fcr_states.append(current)

        # Re-encoding walks from level 1 back up to the global level, reusing
        # the backbone's sampled centers for each downsampling step.
        fre_states = []
        parts = [fcr_states[-1], bb_states[1]]
        current = None
        for j, layer in enumerate(self.re_encode):
            if j > 0:
                parts = [current, fcr_states[depth - 1 - j], bb_states[j + 1]]
            current = layer(parts, centers[j + 1], mode)
            fre_states.append(current)
            fallbacks += layer.last_fallback_centers

        return TrunkTrace(bb=bb_states, fcr=fcr_states, fre=fre_states, attrs=attrs,
                          fallback_centers=fallbacks)

    def head_forward(self, feats: ad.Tensor, mode: str = "eval",
                     rng: np.random.Generator | None = None) -> ad.Tensor:
        """Apply the dense head to a (batch, channels) feature matrix."""
        return self.head(feats, mode, rng)

    def forward_classify(
        self,
        positions: np.ndarray,
        normals: np.ndarray,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        trace: bool = False,
    ):
        """Class logits for one cloud: (1, n_outputs) tensor.

        Train-mode calls batch several clouds' global features through
        ``head_forward`` instead (head batch norm needs >= 2 rows).
        """
        if self.config.task != "classification":
            raise ad.ConfigError("forward_classify on a segmentation model")
        t = self.trunk(positions, normals, mode, rng)
        logits = self.head(t.global_feats, mode, rng)
        return (logits, t) if trace else logits

    def forward_segment(
        self,
        positions: np.ndarray,
        normals: np.ndarray,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        trace: bool = False,
        input_requires_grad: bool = False,
    ):
        """Per-point part logits for one cloud: (n, n_outputs) tensor."""
        if self.config.task != "segmentation":
            raise ad.ConfigError("forward_segment on a classification model")
        t = self.trunk(positions, normals, mode, rng, input_requires_grad)
        # Decode coarse-to-fine: the two re-encoded levels below the global
        # one, the finest cross-referenced level, then the raw attributes.
        fine_sources = [t.fre[-2], t.fre[0], t.fcr[-1]]
        current = t.fre[-1]
        for i, layer in enumerate(self.propagation):
            if i < len(self.propagation) - 1:
                fine = fine_sources[i]
                feats = layer(current, fine.points, fine.feats, mode)
                current = LevelState("fp", fine.level, fine.points, feats, fine.orig_idx)
            else:
                feats = layer(current, t.bb[0].points, t.attrs, mode)
                current = LevelState("fp", 0, t.bb[0].points, feats, t.bb[0].orig_idx)
            t.fp_feats.append(feats)
        logits = self.head(current.feats, mode, rng)
        return (logits, t) if trace else logits


# ---------------------------------------------------------------------------
# Complexity accounting.

FLOP_CONVENTION = (
    "Multiply-accumulate = 2 FLOPs for every (grouped) linear layer at the "
    "forward point counts of the given input size; max-pool and residual/"
    "reduction additions count 1 per element; 3-NN interpolation counts 6 "
    "FLOPs per output channel (3 weighted accumulations); batch norm, ReLU, "
    "bias additions, dropout and neighbor search are excluded. Parameters "
    "count linear weights and biases plus 2 per normalized channel."
)


@dataclass
class LayerCost:
    name: str
    params: int
    flops: int


@dataclass
class ComplexityReport:
    total_params: int
    total_flops: int
    per_layer: list[LayerCost]
    n_points: int
    convention: str = FLOP_CONVENTION

    def table(self) -> str:
        lines = [f"{'layer':<10} {'params':>12} {'flops':>16}"]
        for c in self.per_layer:
            lines.append(f"{c.name:<10} {c.params:>12,} {c.flops:>16,}")
        lines.append(f"{'total':<10} {self.total_params:>12,} {self.total_flops:>16,}")
        return "\n".join(lines)


def _mlp_cost(c_in: int, widths: list[int], n_groups: int, rows: int, with_bn: bool = True):
    params = 0
    flops = 0
    c = c_in
    for w in widths:
        g = effective_groups(n_groups, c, w)
        params += c * w // g + w  # weights + bias
        if with_bn:
            params += 2 * w  # scale + shift
        flops += 2 * rows * c * w // g
        c = w
    return params, flops


def complexity(config: ModelConfig, n_points: int = 1024) -> ComplexityReport:
    """Parameter and FLOP accounting per layer for a given input size.

    Derived from the configuration alone (not from built arrays) so it can
    serve as an independent check against a constructed model.
    """
    _validate(config)
    g = config.n_groups
    per_layer = []

    counts = [n_points]
    for s in config.backbone:
        counts.append(1 if s.out_points is None else min(s.out_points, counts[-1]))

    for i, s in enumerate(config.backbone):
        params = 0
        flops = 0
        if s.radii is None:
            params, flops = _mlp_cost(s.in_channels + 6, s.widths[0], g, counts[i])
            flops += counts[i] * s.widths[0][-1]  # global max-pool comparisons
        else:
            for ws, smp in zip(s.widths, s.samples):
                p, f = _mlp_cost(s.in_channels + 6, ws, g, counts[i + 1] * smp)
                params += p
                flops += f + counts[i + 1] * smp * ws[-1]  # pool comparisons
        per_layer.append(LayerCost(f"bb{i + 1}", params, flops))

    depth = len(config.backbone) - 1
    # Cross-referencing transforms at the coarse level (counts[depth + 1 - j]
    # rows), then interpolates onto the next finer level.
    for j, s in enumerate(config.cross_reference):
        rows = counts[depth + 1 - j]
        fine_rows = counts[depth - j]
        p, f = _mlp_cost(s.in_channels, s.widths, g, rows)
        if config.use_residual:
            f += rows * s.in_channels  # reduction additions
            f += rows * s.widths[-1]
        f += 6 * fine_rows * s.widths[-1]  # 3-NN interpolation
        per_layer.append(LayerCost(f"fcr{j + 1}", p, f))

    for j, s in enumerate(config.re_encode):
        rows = counts[j + 1]
        p, f = _mlp_cost(s.in_channels, s.widths, g, rows)
        if config.use_residual:
            f += rows * s.in_channels
        if s.radius is None:
            f += rows * s.widths[-1]
        else:
            f += counts[j + 2] * s.samples * s.widths[-1]
        per_layer.append(LayerCost(f"fre{j + 1}", p, f))

    # Propagation decodes at the fine level of each step: the two re-encoded
    # levels below the global one, then level 1, then the full input.
    fp_rows = [counts[depth], counts[depth - 1], counts[1], counts[0]]
    coarse_w = [config.re_encode[-1].widths[-1]] + [s.widths[-1] for s in config.propagation[:-1]]
    for i, s in enumerate(config.propagation):
        rows = fp_rows[i] if i < len(fp_rows) else counts[0]
        p, f = _mlp_cost(s.in_channels, s.widths, 1, rows)
        f += 6 * rows * coarse_w[i]  # interpolation of the coarse features
        per_layer.append(LayerCost(f"fp{i + 1}", p, f))

    head_rows = 1 if config.task == "classification" else n_points
    params = 0
    flops = 0
    c = config.head[0].in_channels
    for i, s in enumerate(config.head):
        last = i == len(config.head) - 1
        params += c * s.out_channels + s.out_channels
        if not last:
            params += 2 * s.out_channels
        flops += 2 * head_rows * c * s.out_channels
        c = s.out_channels
    per_layer.append(LayerCost("fc", params, flops))

    return ComplexityReport(
        total_params=sum(c.params for c in per_layer),
        total_flops=sum(c.flops for c in per_layer),
        per_layer=per_layer,
        n_points=n_points,
    )
