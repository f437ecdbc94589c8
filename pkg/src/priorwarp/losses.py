"""Soft-Dice, centroid, and regularization losses with analytic gradients.

The fitted pipeline is

    probs = softmax_fg(prior_logits)          (per-voxel, background logit 0)
    affine = apply_class_shifts(probs, theta) (per-class translation)
    warped = backward-warp of affine through field = lattice + B @ delta

and the total loss is

    dice(pred) + dice(warped prior) + gamma * centroid + lambda * reg

where the centroid term reads the post-affine, pre-spline volume. Gradients
are hand-written reverse mode: dice -> warped values -> (scatter to the
affine volume, spatial derivative to the field -> delta), then through the
per-class shifts to theta and through the softmax to the logits. Trilinear
sampling is piecewise linear; all derivatives use the right-continuous cell
convention, which is the a.e. derivative away from integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affine import shift_sample, shift_sample_with_dt, shift_scatter
from .errors import NumericError
from .prior import softmax_fg
from .tps import Displacements, TpsSystem, field_basis
from .volume import LabelMap, Volume, corner_offsets, one_hot

# epsilon in the dice denominator (the numerator is left exact, so a class
# empty in both masks scores dice 0: kept as defined, not patched)
DICE_EPS = 1e-5
# soft-centroid channels below this mass have no defined center
MASS_FLOOR = 1e-8


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components; total = dice_pred + dice_prior + gamma*centroid + lam*reg."""

    dice_pred: float
    dice_prior: float
    centroid: float
    reg: float
    total: float


@dataclass(frozen=True)
class Gradients:
    """Gradients of the total loss w.r.t. theta, delta, and prior logits."""

    d_theta: np.ndarray
    d_delta: np.ndarray
    d_prior: np.ndarray

    def __post_init__(self):
        for name in ("d_theta", "d_delta", "d_prior"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(arr).all():
                raise NumericError(f"non-finite values in {name}")
            object.__setattr__(self, name, arr)


def soft_dice(y: Volume, yhat: Volume, eps: float = DICE_EPS) -> float:
    """1 - mean_c 2*sum(yhat*y) / (sum(yhat) + sum(y) + eps).

    y must be one-hot, yhat in [0,1]; eps sits only in the denominator.
    """
    if y.data.shape != yhat.data.shape:
        raise ValueError(
            f"shape mismatch: y {y.data.shape} vs yhat {yhat.data.shape}"
        )
    if yhat.data.min() < 0.0 or yhat.data.max() > 1.0:
        raise ValueError("yhat values must lie in [0, 1]")
    c_cls = y.c
    acc = 0.0
    for c in range(c_cls):
        num = 2.0 * float(np.dot(yhat.data[c].ravel(), y.data[c].ravel()))
        den = float(yhat.data[c].sum()) + float(y.data[c].sum()) + eps
        acc += num / den
    return 1.0 - acc / c_cls


def hard_centroids(y: LabelMap, c_cls: int) -> list[np.ndarray | None]:
    """Mean voxel coordinate per class; absent classes yield None."""
    out: list[np.ndarray | None] = []
    for c in range(c_cls):
        where = np.argwhere(y.labels == c + 1)
        out.append(where.mean(axis=0) if where.size else None)
    return out


def soft_centroids(v: Volume, floor: float = MASS_FLOOR) -> list[np.ndarray | None]:
    """Activation-weighted mean coordinate per channel.

    Channels with total mass below the floor yield None.
    """
    if v.data.min() < 0.0:
        raise ValueError("soft centroids need non-negative activations")
    lattice = _lattice_flat(v.dims)
    out: list[np.ndarray | None] = []
    for c in range(v.c):
        flat = v.data[c].ravel()
        mass = float(flat.sum())
        if mass < floor:
            out.append(None)
        else:
            out.append((flat @ lattice) / mass)
    return out


def centroid_loss(pr_affine: Volume, y: LabelMap) -> float:
    """Mean distance between soft prior centroids and hard target centroids.

    Averaged over classes present in both inputs; no shared class gives 0.
    """
    if pr_affine.dims != y.dims:
        raise ValueError(f"dim mismatch: {pr_affine.dims} vs {y.dims}")
    soft = soft_centroids(pr_affine)
    hard = hard_centroids(y, pr_affine.c)
    dists = [
        float(np.linalg.norm(s - h))
        for s, h in zip(soft, hard)
        if s is not None and h is not None
    ]
    return sum(dists) / len(dists) if dists else 0.0


def control_reg(disp: Displacements) -> float:
    """Sum of Euclidean norms of the control-point displacements."""
    return sum(float(np.linalg.norm(row)) for row in disp.delta)


def total_loss(
    y: LabelMap,
    yhat_pred: Volume | None,
    pr_deformed: Volume,
    pr_affine: Volume,
    disp: Displacements,
    gamma: float,
    lam: float,
    eps: float = DICE_EPS,
) -> LossBreakdown:
    """Compose the loss terms; yhat_pred=None means no predictor network."""
    y1h = one_hot(y, pr_deformed.c)
    dice_pred = soft_dice(y1h, yhat_pred, eps) if yhat_pred is not None else 0.0
    dice_prior = soft_dice(y1h, pr_deformed, eps)
    cent = centroid_loss(pr_affine, y)
    reg = control_reg(disp)
    total = dice_pred + dice_prior + gamma * cent + lam * reg
    return LossBreakdown(dice_pred, dice_prior, cent, reg, total)


def _lattice_flat(dims: tuple[int, int, int]) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


class DeformContext:
    """Precomputed per-target state for repeated loss/gradient evaluation.

    Holds the one-hot target, its hard centroids, the voxel lattice, and the
    basis B with field = lattice + B @ delta for the given system and target
    dims. All evaluations against one target reuse this state; the prior
    probabilities stay an argument because they change during prior learning.
    """

    def __init__(
        self,
        sys: TpsSystem,
        y: LabelMap,
        c_cls: int,
        eps: float = DICE_EPS,
        basis: np.ndarray | None = None,
    ):
        if y.labels.max(initial=0) > c_cls:
            raise ValueError(
                f"target contains class {int(y.labels.max())} but c_cls={c_cls}"
            )
        self.sys = sys
        self.c_cls = c_cls
        self.eps = float(eps)
        self.dims = y.dims
        self.spacing = y.spacing
        self.hwd = int(np.prod(y.dims))
        self.y_flat = one_hot(y, c_cls).data.reshape(c_cls, self.hwd)
        self.y_sum = self.y_flat.sum(axis=1)
        self.hard_c = hard_centroids(y, c_cls)
        self.lattice = _lattice_flat(y.dims)
        # cases sharing one system and dims can share this array
        self.basis = field_basis(sys, y.dims) if basis is None else basis

    # -- forward ---------------------------------------------------------

    def _affine_volume(self, probs: np.ndarray, theta: np.ndarray) -> np.ndarray:
        a = np.empty_like(probs)
        for c in range(self.c_cls):
            a[c] = shift_sample(probs[c], theta[c])
        return a

    def _corners(self, delta: np.ndarray):
        """Gather bundle for the spline warp.

        Per corner: (flat, ok, w, signs, pairs) where pairs holds the
        unsigned products of the other two axes' weight factors; the a.e.
        weight derivative along each axis is the signed pair. Axis masks,
        weight factors, and pairwise products are shared across corners.
        """
        coords = self.lattice + self.basis @ delta  # (hwd, 3)
        if not np.isfinite(coords).all():
            raise NumericError("non-finite values in warp field")
        base_f = np.floor(coords)
        frac = coords - base_f
        base = base_f.astype(np.int64)
        dh, dw_, dd = self.dims
        bh, bw, bd = base[:, 0], base[:, 1], base[:, 2]
        flat0 = (bh * dw_ + bw) * dd + bd
        # corner offset o keeps axis index in range iff base in [-o, dim-o)
        okh = ((bh >= 0) & (bh < dh), (bh >= -1) & (bh < dh - 1))
        okw = ((bw >= 0) & (bw < dw_), (bw >= -1) & (bw < dw_ - 1))
        okd = ((bd >= 0) & (bd < dd), (bd >= -1) & (bd < dd - 1))
        fh, fw, fd = frac[:, 0], frac[:, 1], frac[:, 2]
        wh = (1.0 - fh, fh)
        ww = (1.0 - fw, fw)
        wd = (1.0 - fd, fd)
        hxw = tuple(tuple(wh[i] * ww[j] for j in (0, 1)) for i in (0, 1))
        hxd = tuple(tuple(wh[i] * wd[k] for k in (0, 1)) for i in (0, 1))
        wxd = tuple(tuple(ww[j] * wd[k] for k in (0, 1)) for j in (0, 1))
        bundle = []
        for i, j, k in corner_offsets():
            ok = okh[i] & okw[j] & okd[k]
            flat = np.where(ok, flat0 + ((i * dw_ + j) * dd + k), 0)
            w = hxw[i][j] * wd[k]
            signs = (1.0 if i else -1.0, 1.0 if j else -1.0, 1.0 if k else -1.0)
            pairs = (wxd[j][k], hxd[i][k], hxw[i][j])
            bundle.append((flat, ok, w, signs, pairs))
        return bundle

    def _spline_forward(self, aff: np.ndarray, delta: np.ndarray):
        aff_flat = aff.reshape(self.c_cls, self.hwd)
        bundle = self._corners(delta)
        yhat = np.zeros((self.c_cls, self.hwd), dtype=np.float64)
        corner_vals = []
        for flat, ok, w, _, _ in bundle:
            vals = np.take(aff_flat, flat, axis=1)
            vals *= ok  # masked gather, zeros outside the grid
            corner_vals.append(vals)
            yhat += w * vals
        return aff_flat, bundle, corner_vals, yhat

    def _forward(self, probs: np.ndarray, theta: np.ndarray, delta: np.ndarray):
        aff = self._affine_volume(probs, theta)
        return (aff,) + self._spline_forward(aff, delta)

    def _dice_pieces(self, yhat: np.ndarray):
        inter = np.einsum("cm,cm->c", yhat, self.y_flat)
        denom = yhat.sum(axis=1) + self.y_sum + self.eps
        dice = 1.0 - float(np.sum(2.0 * inter / denom)) / self.c_cls
        return inter, denom, dice

    def _centroid_pieces(self, aff_flat: np.ndarray):
        masses = aff_flat.sum(axis=1)
        moments = aff_flat @ self.lattice
        rows = []
        for c in range(self.c_cls):
            if self.hard_c[c] is None or masses[c] < MASS_FLOOR:
                continue
            cs = moments[c] / masses[c]
            diff = cs - self.hard_c[c]
            rows.append((c, cs, float(masses[c]), float(np.linalg.norm(diff))))
        loss = sum(r[3] for r in rows) / len(rows) if rows else 0.0
        return rows, loss

    def breakdown(
        self,
        probs: np.ndarray,
        theta: np.ndarray,
        delta: np.ndarray,
        gamma: float,
        lam: float,
    ) -> LossBreakdown:
        """Loss components for the pure deformation pipeline (no predictor)."""
        _, aff_flat, _, _, yhat = self._forward(probs, theta, delta)
        _, _, dice = self._dice_pieces(yhat)
        _, cent = self._centroid_pieces(aff_flat)
        reg = control_reg(Displacements(delta))
        total = dice + gamma * cent + lam * reg
        if not np.isfinite(total):
            raise NumericError(
                f"non-finite loss: dice={dice} centroid={cent} reg={reg}"
            )
        return LossBreakdown(0.0, dice, cent, reg, total)

    # -- reverse mode ----------------------------------------------------

    def loss_and_grads(
        self,
        probs: np.ndarray,
        theta: np.ndarray,
        delta: np.ndarray,
        gamma: float,
        lam: float,
        want_params: bool = True,
        want_prior: bool = False,
        prior_through_centroid: bool = True,
    ):
        """Breakdown plus requested gradients in one reverse sweep.

        want_params -> d_theta, d_delta; want_prior -> d_logits (through the
        softmax). prior_through_centroid=False restricts the prior gradient
        to the dice term, the flow used by alternating prior updates.
        """
        if want_params:
            # fused sample + derivative shares the shifted slice copies
            aff = np.empty_like(probs)
            aff_dts = []
            for c in range(self.c_cls):
                aff[c], dt_c = shift_sample_with_dt(probs[c], theta[c])
                aff_dts.append(dt_c)
        else:
            aff = self._affine_volume(probs, theta)
            aff_dts = None
        aff_flat, bundle, corner_vals, yhat = self._spline_forward(aff, delta)
        inter, denom, dice = self._dice_pieces(yhat)
        cent_rows, cent = self._centroid_pieces(aff_flat)
        reg = control_reg(Displacements(delta))
        total = dice + gamma * cent + lam * reg
        if not np.isfinite(total):
            raise NumericError(
                f"non-finite loss: dice={dice} centroid={cent} reg={reg}"
            )
        breakdown = LossBreakdown(0.0, dice, cent, reg, total)

        # dice adjoint on the warped values
        d_yhat = (
            -(2.0 / self.c_cls)
            * (self.y_flat * denom[:, None] - inter[:, None])
            / (denom**2)[:, None]
        )

        # scatter through the spline gather back onto the affine volume;
        # out-of-grid lanes carry weight 0 into the index-0 bin
        da_dice = np.zeros((self.c_cls, self.hwd), dtype=np.float64)
        for flat, ok, w, _, _ in bundle:
            wv = d_yhat * w
            wv *= ok
            for c in range(self.c_cls):
                da_dice[c] += np.bincount(flat, weights=wv[c], minlength=self.hwd)
        da_dice = da_dice.reshape((self.c_cls,) + self.dims)

        # centroid adjoint on the affine volume (gamma-scaled)
        da_cent = np.zeros_like(da_dice)
        if gamma != 0.0 and cent_rows:
            coef = gamma / len(cent_rows)
            for c, cs, mass, dist in cent_rows:
                if dist == 0.0:
                    continue  # subgradient 0 at the coincident-centroid kink
                u = (cs - self.hard_c[c]) / dist
                contrib = (self.lattice @ u - float(cs @ u)) * (coef / mass)
                da_cent[c] += contrib.reshape(self.dims)

        da_total = da_dice + da_cent

        d_theta = None
        d_delta = None
        if want_params:
            # field adjoint: per-voxel spatial derivative times dice adjoint
            g_field = np.zeros((self.hwd, 3), dtype=np.float64)
            for (flat, ok, w, signs, pairs), vals in zip(bundle, corner_vals):
                vals *= d_yhat  # corner values are not needed past this point
                vbar = vals.sum(axis=0)
                for axis in range(3):
                    t = pairs[axis] * vbar
                    if signs[axis] > 0.0:
                        g_field[:, axis] += t
                    else:
                        g_field[:, axis] -= t
            d_delta = self.basis.T @ g_field
            nz = np.linalg.norm(delta, axis=1)
            pos = nz > 0.0
            d_delta[pos] += lam * delta[pos] / nz[pos, None]

            d_theta = np.zeros((self.c_cls, 3), dtype=np.float64)
            da_flat = da_total.reshape(self.c_cls, self.hwd)
            for c in range(self.c_cls):
                dt_flat = aff_dts[c].reshape(3, self.hwd)
                for axis in range(3):
                    d_theta[c, axis] = float(np.dot(da_flat[c], dt_flat[axis]))

        d_logits = None
        if want_prior:
            da_prior = da_total if prior_through_centroid else da_dice
            dp = np.empty_like(probs)
            for c in range(self.c_cls):
                dp[c] = shift_scatter(da_prior[c], theta[c])
            s = np.einsum("chwd,chwd->hwd", probs, dp)
            d_logits = probs * (dp - s[None])

        return breakdown, d_theta, d_delta, d_logits


def grad_total(
    prior_logits: Volume,
    shifts,
    disp: Displacements,
    sys: TpsSystem,
    y: LabelMap,
    gamma: float,
    lam: float,
    eps: float = DICE_EPS,
) -> Gradients:
    """Analytic gradients of the total loss for the deformation pipeline."""
    ctx = DeformContext(sys, y, prior_logits.c, eps)
    probs = softmax_fg(prior_logits.data)
    _, d_theta, d_delta, d_logits = ctx.loss_and_grads(
        probs,
        np.asarray(shifts.theta, dtype=np.float64),
        disp.delta,
        gamma,
        lam,
        want_params=True,
        want_prior=True,
    )
    return Gradients(d_theta, d_delta, d_logits)
