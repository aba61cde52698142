"""Network building blocks.

Every block is a shared point-wise MLP (grouped linear + batch norm + ReLU
per layer) wrapped in stage-specific plumbing:

* ``SetAbstraction``: sample centers (farthest point), group neighbors (ball
  query), run the MLP on ``[features | relative xyz | normals]`` per member,
  max-pool each group. Layers whose input and output widths match add an
  identity residual after the activation. A ``radius=None`` layer groups the
  whole cloud around the origin (global feature).
* ``CrossReference``: concatenate same-level decoder/backbone features, run
  the MLP, add a parameter-free channel-reduction residual of the concat,
  then upsample to the next finer level by inverse-square-distance 3-NN
  interpolation.
* ``ReEncode``: concatenate all same-level stage features, run the MLP, add
  the concat itself as an identity residual (widths are arranged to match),
  then downsample by max-pooling balls around the backbone's own sampled
  centers, or pool globally when ``radius=None``.
* ``FeaturePropagation``: interpolate coarse features to fine positions,
  concatenate a skip, run a dense MLP.
* ``DenseHead``: linear + BN + ReLU + dropout stack with a plain final layer.

Positions are plain arrays and feed only the non-differentiable index paths;
features (and the xyz/normal attribute tensors gathered per group) flow
through autodiff ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import pointops as po

__all__ = [
    "LevelState",
    "reduction",
    "effective_groups",
    "GroupedMLP",
    "SetAbstraction",
    "CrossReference",
    "ReEncode",
    "FeaturePropagation",
    "DenseHead",
]


@dataclass
class LevelState:
    """Features of one abstraction level of one stage.

    Attributes:
        stage: ``"bb"``, ``"fcr"`` or ``"fre"``.
        level: 0 for the raw input cloud, increasing toward the global level.
        points: ``(n, 3)`` float64 positions (not differentiated).
        feats: ``(n, d)`` feature tensor, or None for the raw input level.
        orig_idx: ``(n,)`` indices into the original cloud, or None for the
            synthetic global point.
    """

    stage: str
    level: int
    points: np.ndarray
    feats: "ad.Tensor | None"
    orig_idx: "np.ndarray | None"

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def channels(self) -> int:
        return 0 if self.feats is None else self.feats.data.shape[-1]


def reduction(x: ad.Tensor, k: int) -> ad.Tensor:
    """Parameter-free channel reduction: sum each run of ``k`` adjacent
    channels, mapping ``(..., d)`` to ``(..., d / k)``.

    Linear in its input; the backward pass copies each output gradient into
    its k-wide bucket. ``k = 1`` is the identity.
    """
    return ad.sum_adjacent(x, k)


def effective_groups(n_groups: int, c_in: int, c_out: int) -> int:
    """Largest group count <= n_groups dividing both channel counts.

    Raw-geometry layers (6 input channels) cannot split into 4 or 8 groups;
    they fall back to gcd-compatible grouping while the rest of the network
    keeps the requested count.
    """
    return math.gcd(n_groups, math.gcd(c_in, c_out))


def _init_linear(rng: np.random.Generator, g: int, c_in: int, c_out: int, dtype):
    """Fan-in-scaled uniform weights (bound sqrt(1/fan_in)), zero biases."""
    fan_in = c_in // g
    bound = math.sqrt(1.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(g, c_in // g, c_out // g)).astype(dtype)
    b = np.zeros(c_out, dtype=dtype)
    return ad.Tensor(w, requires_grad=True), ad.Tensor(b, requires_grad=True)


class GroupedMLP:
    """Shared point-wise stack: (grouped linear -> BN -> ReLU) per width.

    Args:
        name: diagnostic prefix, also the parameter-name prefix.
        in_channels: input width.
        widths: output width per layer.
        groups: group count, one int for all layers or one per layer. Each
            layer's channel counts must divide by its group count.
        rng: initialization stream.
        residual: add a post-activation identity residual on every layer
            whose input and output widths match.
    """

    def __init__(
        self,
        name: str,
        in_channels: int,
        widths: list[int],
        groups: "int | list[int]",
        rng: np.random.Generator,
        dtype=np.float32,
        residual: bool = False,
    ):
        if not widths:
            raise ad.ConfigError(f"{name}: empty width list")
        if isinstance(groups, int):
            groups = [groups] * len(widths)
        if len(groups) != len(widths):
            raise ad.ConfigError(f"{name}: {len(groups)} group counts for {len(widths)} layers")
        self.name = name
        self.in_channels = in_channels
        self.widths = list(widths)
        self.groups = list(groups)
        self.residual = residual
        self.bn_bypass = False
        self.bn_momentum = 0.1
        self.bn_eps = 1e-5
        self._weights: list[ad.Tensor] = []
        self._biases: list[ad.Tensor] = []
        self._gammas: list[ad.Tensor] = []
        self._betas: list[ad.Tensor] = []
        self._running_mean: list[np.ndarray] = []
        self._running_var: list[np.ndarray] = []

        c_in = in_channels
        for i, (c_out, g) in enumerate(zip(widths, groups)):
            if g < 1 or c_in % g != 0 or c_out % g != 0:
                raise ad.ConfigError(
                    f"{name}: layer {i} channels {c_in}->{c_out} not divisible into {g} groups"
                )
            w, b = _init_linear(rng, g, c_in, c_out, dtype)
            self._weights.append(w)
            self._biases.append(b)
            self._gammas.append(ad.Tensor(np.ones(c_out, dtype=dtype), requires_grad=True))
            self._betas.append(ad.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))
            self._running_mean.append(np.zeros(c_out, dtype=dtype))
            self._running_var.append(np.ones(c_out, dtype=dtype))
            c_in = c_out
        self.out_channels = c_in

    def __call__(self, x: ad.Tensor, mode: str) -> ad.Tensor:
        for i in range(len(self.widths)):
            c_out = self.widths[i]
            h = ad.grouped_linear(x, self._weights[i], self._biases[i], self.groups[i])
            if not self.bn_bypass:
                lead = h.data.shape[:-1]
                rows = int(np.prod(lead)) if lead else 1
                # A single row carries no batch statistics (the global-feature
                # level); normalize it with the running buffers instead.
                bn_mode = "eval" if (mode == "train" and rows == 1) else mode
                flat = ad.reshape(h, (rows, c_out))
                flat = ad.batch_norm(
                    flat,
                    self._gammas[i],
                    self._betas[i],
                    self._running_mean[i],
                    self._running_var[i],
                    bn_mode,
                    momentum=self.bn_momentum,
                    eps=self.bn_eps,
                )
                h = ad.reshape(flat, (*lead, c_out))
            h = ad.relu(h)
            if self.residual and h.data.shape[-1] == x.data.shape[-1]:
                h = ad.add(h, x)
            x = h
        return x

    def parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        for i in range(len(self.widths)):
            out[f"{self.name}.l{i}.w"] = self._weights[i]
            out[f"{self.name}.l{i}.b"] = self._biases[i]
            out[f"{self.name}.l{i}.gamma"] = self._gammas[i]
            out[f"{self.name}.l{i}.beta"] = self._betas[i]
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(len(self.widths)):
            out[f"{self.name}.l{i}.rm"] = self._running_mean[i]
            out[f"{self.name}.l{i}.rv"] = self._running_var[i]
        return out

    def zero_transform(self) -> None:
        """Zero every weight and bias (BN scale/shift untouched)."""
        for w, b in zip(self._weights, self._biases):
            w.data[:] = 0
            b.data[:] = 0


def _gather_attr_groups(
    state: LevelState,
    member_idx: np.ndarray,
    center_local: "np.ndarray | None",
    attrs_xyz: ad.Tensor,
    attrs_nrm: ad.Tensor,
):
    """Per-group member inputs ``[feats | relative xyz | normals]``.

    ``member_idx`` indexes the level's own points; attribute channels are
    gathered from the original cloud through ``orig_idx`` so they stay on the
    differentiable feature path. ``center_local=None`` means the origin is
    the center (global layer), turning relative into absolute coordinates.
    """
    orig = state.orig_idx[member_idx]
    member_xyz = ad.gather_rows(attrs_xyz, orig)
    if center_local is None:
        rel = member_xyz
    else:
        center_xyz = ad.gather_rows(attrs_xyz, state.orig_idx[center_local])
        rel = ad.sub(member_xyz, ad.reshape(center_xyz, (len(center_local), 1, 3)))
    member_nrm = ad.gather_rows(attrs_nrm, orig)
    parts = [rel, member_nrm]
    if state.feats is not None:
        parts.insert(0, ad.gather_rows(state.feats, member_idx))
    return ad.concat_channels(parts)


class SetAbstraction:
    """One backbone level: sample, group, transform, pool.

    ``radii=None`` builds the global layer: a single group holding every
    point, centered on the origin. Multiple radii share the same sampled
    centers and concatenate their pooled branch outputs (multi-scale
    grouping).

    Args:
        in_channels: feature width of the incoming level (0 for raw input).
        radii: ball radii per branch, or None for the global layer.
        samples: neighborhood sizes per branch.
        widths: MLP widths per branch (a single list for the global layer).
        out_points: centers to sample; clamped to the incoming point count so
            sparse clouds degrade instead of failing.
        n_groups: requested group count; raw-geometry layers fall back to the
            gcd-compatible count (see ``effective_groups``).
    """

    def __init__(
        self,
        name: str,
        in_channels: int,
        radii: "list[float] | None",
        samples: "list[int] | None",
        widths: list[list[int]],
        out_points: "int | None",
        n_groups: int,
        rng: np.random.Generator,
        dtype=np.float32,
        residual: bool = True,
    ):
        self.name = name
        self.in_channels = in_channels
        self.radii = list(radii) if radii is not None else None
        self.samples = list(samples) if samples is not None else None
        self.out_points = out_points
        if self.radii is not None:
            if self.samples is None or len(self.samples) != len(self.radii):
                raise ad.ConfigError(f"{name}: radii/samples length mismatch")
            if len(widths) != len(self.radii):
                raise ad.ConfigError(f"{name}: one width list per branch required")
            if out_points is None or out_points < 1:
                raise ad.ConfigError(f"{name}: out_points must be >= 1")
        else:
            if len(widths) != 1:
                raise ad.ConfigError(f"{name}: global layer takes a single width list")
        branch_in = in_channels + 6  # + relative xyz + normals
        self.branches = [
            GroupedMLP(
                f"{name}.b{j}",
                branch_in,
                ws,
                [effective_groups(n_groups, branch_in if i == 0 else ws[i - 1], ws[i]) for i in range(len(ws))],
                rng,
                dtype,
                residual=residual,
            )
            for j, ws in enumerate(widths)
        ]
        self.out_channels = sum(b.out_channels for b in self.branches)
        self.last_fallback_centers = 0

    def __call__(
        self,
        state: LevelState,
        attrs_xyz: ad.Tensor,
        attrs_nrm: ad.Tensor,
        mode: str,
        rng: np.random.Generator | None = None,
    ) -> tuple[LevelState, "np.ndarray | None"]:
        """Advance one level.

        Returns the new state plus the sampled center indices (into the
        incoming level's points; None for the global layer), which the
        re-encoding stage reuses for its downsampling.
        """
        n = state.n_points
        if self.radii is None:
            flat_idx = np.arange(n)[None, :]
            h = _gather_attr_groups(state, flat_idx, None, attrs_xyz, attrs_nrm)
            h = self.branches[0](h, mode)
            feats = ad.max_over_set(h)
            out = LevelState("bb", state.level + 1, np.zeros((1, 3)), feats, None)
            self.last_fallback_centers = 0
            return out, None

        m = min(self.out_points, n)
        start = "random" if (mode == "train" and rng is not None) else "lowest"
        centers = po.farthest_point_sample(state.points, m, start=start, rng=rng)
        center_pts = state.points[centers]
        pooled = []
        fallbacks = 0
        for branch, radius, s in zip(self.branches, self.radii, self.samples):
            idx, fb = po.ball_query(state.points, center_pts, radius, s)
            fallbacks += int(fb.sum())
            h = _gather_attr_groups(state, idx, centers, attrs_xyz, attrs_nrm)
            pooled.append(ad.max_over_set(branch(h, mode)))
        self.last_fallback_centers = fallbacks
        feats = pooled[0] if len(pooled) == 1 else ad.concat_channels(pooled)
        out = LevelState("bb", state.level + 1, center_pts, feats, state.orig_idx[centers])
        return out, centers

    def parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        for b in self.branches:
            out.update(b.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for b in self.branches:
            out.update(b.buffers())
        return out


class CrossReference:
    """One cross-referencing level: concat same-level features, transform,
    add the channel-reduction residual, upsample to the next finer level.

    The reduction factor is derived as concat_width / final_width and must be
    a positive integer.
    """

    def __init__(
        self,
        name: str,
        in_channels: int,
        widths: list[int],
        n_groups: int,
        rng: np.random.Generator,
        dtype=np.float32,
        residual: bool = True,
    ):
        self.name = name
        self.in_channels = in_channels
        self.use_residual = residual
        out = widths[-1]
        if in_channels % out != 0:
            raise ad.ConfigError(
                f"{name}: concat width {in_channels} not an integer multiple of output width {out}"
            )
        self.k = in_channels // out
        groups = []
        c = in_channels
        for w in widths:
            groups.append(effective_groups(n_groups, c, w))
            c = w
        self.mlp = GroupedMLP(f"{name}.mlp", in_channels, widths, groups, rng, dtype, residual=False)
        self.out_channels = out

    def __call__(
        self, f_fcr: LevelState, f_bb: "LevelState | None", target: LevelState, mode: str
    ) -> LevelState:
        """Refine ``f_fcr`` (optionally concatenated with same-level backbone
        features) and interpolate the result onto ``target``'s positions."""
        if f_bb is not None:
            if f_bb.n_points != f_fcr.n_points:
                raise ad.ConfigError(f"{self.name}: stage features disagree on point count")
            cat = ad.concat_channels([f_fcr.feats, f_bb.feats])
        else:
            cat = f_fcr.feats
        if cat.data.shape[-1] != self.in_channels:
            raise ad.ConfigError(
                f"{self.name}: got {cat.data.shape[-1]} channels, configured for {self.in_channels}"
            )
        ref = self.mlp(cat, mode)
        if self.use_residual:
            ref = ad.add(ref, reduction(cat, self.k))
        up = po.three_nn_interpolate(f_fcr.points, ref, target.points)
        return LevelState("fcr", target.level, target.points, up, target.orig_idx)

    def parameters(self):
        return self.mlp.parameters()

    def buffers(self):
        return self.mlp.buffers()


class ReEncode:
    """One re-encoding level: concat all same-level stage features, transform
    with an identity residual, downsample by pooling around the backbone's
    sampled centers (or globally when ``radius=None``)."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        widths: list[int],
        radius: "float | None",
        samples: "int | None",
        n_groups: int,
        rng: np.random.Generator,
        dtype=np.float32,
        residual: bool = True,
    ):
        self.name = name
        self.in_channels = in_channels
        self.use_residual = residual
        self.radius = radius
        self.samples = samples
        if residual and widths[-1] != in_channels:
            raise ad.ConfigError(
                f"{name}: identity residual needs output width {in_channels}, got {widths[-1]}"
            )
        if radius is not None and (samples is None or samples < 1):
            raise ad.ConfigError(f"{name}: downsampling needs samples >= 1")
        groups = []
        c = in_channels
        for w in widths:
            groups.append(effective_groups(n_groups, c, w))
            c = w
        self.mlp = GroupedMLP(f"{name}.mlp", in_channels, widths, groups, rng, dtype, residual=False)
        self.out_channels = widths[-1]
        self.last_fallback_centers = 0

    def __call__(
        self, parts: list[LevelState], centers: "np.ndarray | None", mode: str
    ) -> LevelState:
        """Args:
            parts: same-level states to concatenate (their point sets must
                coincide); the first one provides the positions.
            centers: backbone-sampled center indices into this level's points
                for the downsampling step; None for the global level.
        """
        base = parts[0]
        for p in parts[1:]:
            if p.n_points != base.n_points:
                raise ad.ConfigError(f"{self.name}: stage features disagree on point count")
        cat = parts[0].feats if len(parts) == 1 else ad.concat_channels([p.feats for p in parts])
        if cat.data.shape[-1] != self.in_channels:
            raise ad.ConfigError(
                f"{self.name}: got {cat.data.shape[-1]} channels, configured for {self.in_channels}"
            )
        ref = self.mlp(cat, mode)
        if self.use_residual:
            ref = ad.add(ref, cat)

        if self.radius is None:
            pooled = ad.max_over_set(ad.reshape(ref, (1, base.n_points, self.out_channels)))
            self.last_fallback_centers = 0
            return LevelState("fre", base.level + 1, np.zeros((1, 3)), pooled, None)

        if centers is None:
            raise ad.ConfigError(f"{self.name}: downsampling level needs backbone centers")
        center_pts = base.points[centers]
        idx, fb = po.ball_query(base.points, center_pts, self.radius, self.samples)
        self.last_fallback_centers = int(fb.sum())
        pooled = ad.max_over_set(ad.gather_rows(ref, idx))
        orig = None if base.orig_idx is None else base.orig_idx[centers]
        return LevelState("fre", base.level + 1, center_pts, pooled, orig)

    def parameters(self):
        return self.mlp.parameters()

    def buffers(self):
        return self.mlp.buffers()


class FeaturePropagation:
    """Decoder level for dense prediction: interpolate coarse features onto
    fine positions, concatenate a skip, run a dense MLP."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        widths: list[int],
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.name = name
        self.in_channels = in_channels
        self.mlp = GroupedMLP(f"{name}.mlp", in_channels, widths, 1, rng, dtype, residual=False)
        self.out_channels = widths[-1]

    def __call__(
        self,
        coarse: LevelState,
        fine_points: np.ndarray,
        fine_feats: "ad.Tensor | None",
        mode: str,
    ) -> ad.Tensor:
        interp = po.three_nn_interpolate(coarse.points, coarse.feats, fine_points)
        cat = interp if fine_feats is None else ad.concat_channels([interp, fine_feats])
        if cat.data.shape[-1] != self.in_channels:
            raise ad.ConfigError(
                f"{self.name}: got {cat.data.shape[-1]} channels, configured for {self.in_channels}"
            )
        return self.mlp(cat, mode)

    def parameters(self):
        return self.mlp.parameters()

    def buffers(self):
        return self.mlp.buffers()

    @property
    def bn_bypass(self):
        return self.mlp.bn_bypass

    @bn_bypass.setter
    def bn_bypass(self, flag):
        self.mlp.bn_bypass = flag


class DenseHead:
    """Classifier/segmenter head: (linear -> BN -> ReLU -> dropout) for every
    layer except the last, which is a plain linear map to the outputs."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        layer_widths: list[int],
        dropout_ps: list[float],
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        if len(layer_widths) != len(dropout_ps):
            raise ad.ConfigError(f"{name}: widths/dropout length mismatch")
        if len(layer_widths) < 1:
            raise ad.ConfigError(f"{name}: at least one layer required")
        self.name = name
        self.in_channels = in_channels
        self.widths = list(layer_widths)
        self.dropout_ps = list(dropout_ps)
        self.bn_bypass = False
        self._weights = []
        self._biases = []
        self._gammas = []
        self._betas = []
        self._running_mean = []
        self._running_var = []
        c = in_channels
        last = len(layer_widths) - 1
        for i, w in enumerate(layer_widths):
            wt, bt = _init_linear(rng, 1, c, w, dtype)
            self._weights.append(wt)
            self._biases.append(bt)
            if i != last:  # the final layer is a plain linear map, no BN
                self._gammas.append(ad.Tensor(np.ones(w, dtype=dtype), requires_grad=True))
                self._betas.append(ad.Tensor(np.zeros(w, dtype=dtype), requires_grad=True))
                self._running_mean.append(np.zeros(w, dtype=dtype))
                self._running_var.append(np.ones(w, dtype=dtype))
            c = w
        self.out_channels = c

    def __call__(self, x: ad.Tensor, mode: str, rng: np.random.Generator | None = None) -> ad.Tensor:
        last = len(self.widths) - 1
        for i in range(len(self.widths)):
            x = ad.grouped_linear(x, self._weights[i], self._biases[i], 1)
            if i == last:
                break
            if not self.bn_bypass:
                x = ad.batch_norm(
                    x,
                    self._gammas[i],
                    self._betas[i],
                    self._running_mean[i],
                    self._running_var[i],
                    mode,
                )
            x = ad.relu(x)
            if self.dropout_ps[i] > 0:
                x = ad.dropout(x, self.dropout_ps[i], mode, rng)
        return x

    def parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        last = len(self.widths) - 1
        for i in range(len(self.widths)):
            out[f"{self.name}.l{i}.w"] = self._weights[i]
            out[f"{self.name}.l{i}.b"] = self._biases[i]
            if i != last:
                out[f"{self.name}.l{i}.gamma"] = self._gammas[i]
                out[f"{self.name}.l{i}.beta"] = self._betas[i]
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(len(self.widths) - 1):
            out[f"{self.name}.l{i}.rm"] = self._running_mean[i]
            out[f"{self.name}.l{i}.rv"] = self._running_var[i]
        return out

    def zero_transform(self) -> None:
        for w, b in zip(self._weights, self._biases):
            w.data[:] = 0
            b.data[:] = 0
