"""RealNVP-style affine coupling flow with exact inverses and hand-written
reverse-mode gradients.

Each coupling layer copies a ``pass`` block of coordinates and maps the
complementary ``transform`` block affinely, with log-scale and shift produced
by two small tanh networks fed the pass block. The Jacobian log-determinant
is the sum of the (clamped) log-scales, negated for the inverse direction.

Two losses are trained against:

* negative mean log-likelihood of a batch under the change of variables
  through the inverse map, and
* a composite loss on reconstructions decoded from imputed latent rows:
  negative mean log-likelihood plus a weighted squared reconstruction error
  on observed cells only.

Gradients are exact reverse-mode derivatives of these losses; there is no
autodiff framework underneath, just the chain rule written out per layer.
"""

from __future__ import annotations

import json

import numpy as np
from scipy.linalg import cho_solve

from .exceptions import NonFiniteError, ValidationError
from .gaussian import GaussianParams, log_density
from .nets import Adam, SmallNet

CHECKPOINT_VERSION = 1

DEFAULT_SCALE_CLAMP = 5.0


def hidden_width(p: int) -> int:
    """Default conditioner width: max(32, 4p), capped at 256."""
    return min(max(32, 4 * p), 256)


class CouplingLayer:
    """One affine coupling transform over a fixed coordinate partition."""

    def __init__(self, pass_idx, transform_idx, scale_net: SmallNet,
                 shift_net: SmallNet, scale_clamp: float = DEFAULT_SCALE_CLAMP,
                 index: int = 0):
        self.pass_idx = np.asarray(pass_idx, dtype=np.intp)
        self.transform_idx = np.asarray(transform_idx, dtype=np.intp)
        p = self.pass_idx.size + self.transform_idx.size
        combined = np.sort(np.concatenate([self.pass_idx, self.transform_idx]))
        if self.pass_idx.size == 0 or self.transform_idx.size == 0:
            raise ValidationError("both partition blocks must be non-empty")
        if not np.array_equal(combined, np.arange(p)):
            raise ValidationError("partition blocks must tile 0..p-1 disjointly")
        self.scale_net = scale_net
        self.shift_net = shift_net
        self.scale_clamp = float(scale_clamp)
        self.index = index

    @property
    def dim(self) -> int:
        return self.pass_idx.size + self.transform_idx.size

    @property
    def params(self) -> list[np.ndarray]:
        return self.scale_net.params + self.shift_net.params

    def _affine_params(self, passed: np.ndarray):
        s_raw, s_cache = self.scale_net.forward(passed)
        shift, t_cache = self.shift_net.forward(passed)
        lam = self.scale_clamp
        log_scale = lam * np.tanh(s_raw / lam)
        if not (np.isfinite(log_scale).all() and np.isfinite(shift).all()):
            raise NonFiniteError("scale/shift network output is not finite",
                                 self.index)
        return log_scale, shift, s_cache, t_cache

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """Map x -> y; returns (y, per-row log_det[, cache])."""
        passed = x[:, self.pass_idx]
        trans = x[:, self.transform_idx]
        log_scale, shift, s_cache, t_cache = self._affine_params(passed)
        scale = np.exp(log_scale)
        y = np.empty_like(x)
        y[:, self.pass_idx] = passed
        y[:, self.transform_idx] = trans * scale + shift
        log_det = log_scale.sum(axis=1)
        if not want_cache:
            return y, log_det
        return y, log_det, (trans, log_scale, scale, s_cache, t_cache)

    def backward_forward(self, cache, d_y: np.ndarray, d_log_det: np.ndarray):
        """Pull cotangents (d_y, d_log_det) back through forward()."""
        trans, log_scale, scale, s_cache, t_cache = cache
        d_yt = d_y[:, self.transform_idx]
        d_trans = d_yt * scale
        d_log_scale = d_yt * trans * scale + d_log_det[:, None]
        d_shift = d_yt
        # derivative of the clamp lam*tanh(u/lam), recovered from its output
        d_s_raw = d_log_scale * (1.0 - (log_scale / self.scale_clamp) ** 2)
        d_pass_s, grads_s = self.scale_net.backward(s_cache, d_s_raw)
        d_pass_t, grads_t = self.shift_net.backward(t_cache, d_shift)
        d_x = np.empty_like(d_y)
        d_x[:, self.pass_idx] = d_y[:, self.pass_idx] + d_pass_s + d_pass_t
        d_x[:, self.transform_idx] = d_trans
        return d_x, grads_s + grads_t

    def inverse(self, y: np.ndarray, want_cache: bool = False):
        """Map y -> x, exactly undoing forward()."""
        passed = y[:, self.pass_idx]
        trans_out = y[:, self.transform_idx]
        log_scale, shift, s_cache, t_cache = self._affine_params(passed)
        inv_scale = np.exp(-log_scale)
        trans = (trans_out - shift) * inv_scale
        x = np.empty_like(y)
        x[:, self.pass_idx] = passed
        x[:, self.transform_idx] = trans
        log_det = -log_scale.sum(axis=1)
        if not want_cache:
            return x, log_det
        return x, log_det, (trans, log_scale, inv_scale, s_cache, t_cache)

    def backward_inverse(self, cache, d_x: np.ndarray, d_log_det: np.ndarray):
        """Pull cotangents (d_x, d_log_det) back through inverse()."""
        trans, log_scale, inv_scale, s_cache, t_cache = cache
        d_xt = d_x[:, self.transform_idx]
        d_trans_out = d_xt * inv_scale
        d_shift = -d_trans_out
        d_log_scale = -d_xt * trans - d_log_det[:, None]
        d_s_raw = d_log_scale * (1.0 - (log_scale / self.scale_clamp) ** 2)
        d_pass_s, grads_s = self.scale_net.backward(s_cache, d_s_raw)
        d_pass_t, grads_t = self.shift_net.backward(t_cache, d_shift)
        d_y = np.empty_like(d_x)
        d_y[:, self.pass_idx] = d_x[:, self.pass_idx] + d_pass_s + d_pass_t
        d_y[:, self.transform_idx] = d_trans_out
        return d_y, grads_s + grads_t


class FlowModel:
    """Ordered stack of coupling layers mapping latent z to data x."""

    def __init__(self, layers: list[CouplingLayer], dim: int):
        if not layers:
            raise ValidationError("flow needs at least one coupling layer")
        for k, layer in enumerate(layers):
            if layer.dim != dim:
                raise ValidationError(f"layer {k} has dim {layer.dim}, flow has {dim}")
            layer.index = k
        self.layers = layers
        self.dim = dim

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.params)
        return out

    def _as_batch(self, z) -> tuple[np.ndarray, bool]:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        batch = z[None, :] if single else z
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise ValidationError(f"expected (*, {self.dim}) input, got {z.shape}")
        return batch, single

    def forward(self, z):
        """z -> x through every layer; log-determinants add."""
        batch, single = self._as_batch(z)
        log_det = np.zeros(batch.shape[0])
        for layer in self.layers:
            batch, ld = layer.forward(batch)
            log_det += ld
        if single:
            return batch[0], float(log_det[0])
        return batch, log_det

    def inverse(self, x):
        """x -> z through every layer in reverse order."""
        batch, single = self._as_batch(x)
        log_det = np.zeros(batch.shape[0])
        for layer in reversed(self.layers):
            batch, ld = layer.inverse(batch)
            log_det += ld
        if single:
            return batch[0], float(log_det[0])
        return batch, log_det

    def forward_cached(self, z: np.ndarray):
        batch, _ = self._as_batch(z)
        log_det = np.zeros(batch.shape[0])
        caches = [None] * self.n_layers
        for k, layer in enumerate(self.layers):
            batch, ld, caches[k] = layer.forward(batch, want_cache=True)
            log_det += ld
        return batch, log_det, caches

    def inverse_cached(self, x: np.ndarray):
        batch, _ = self._as_batch(x)
        log_det = np.zeros(batch.shape[0])
        caches = [None] * self.n_layers
        for k in range(self.n_layers - 1, -1, -1):
            batch, ld, caches[k] = self.layers[k].inverse(batch, want_cache=True)
            log_det += ld
        return batch, log_det, caches

    def backward_forward_chain(self, caches, d_out: np.ndarray, d_log_det: np.ndarray):
        """Gradients of a scalar through forward(); layers visited last-first."""
        grads = [None] * self.n_layers
        d = d_out
        for k in range(self.n_layers - 1, -1, -1):
            d, grads[k] = self.layers[k].backward_forward(caches[k], d, d_log_det)
        flat = []
        for g in grads:
            flat.extend(g)
        return flat

    def backward_inverse_chain(self, caches, d_out: np.ndarray, d_log_det: np.ndarray):
        """Gradients of a scalar through inverse(); layer 0 was applied last."""
        grads = [None] * self.n_layers
        d = d_out
        for k in range(self.n_layers):
            d, grads[k] = self.layers[k].backward_inverse(caches[k], d, d_log_det)
        flat = []
        for g in grads:
            flat.extend(g)
        return flat

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat_params(self, vec: np.ndarray) -> None:
        offset = 0
        for p in self.parameters():
            p[...] = vec[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != vec.size:
            raise ValidationError(f"flat vector has {vec.size} entries, need {offset}")


def reinit_flow(p: int, n_layers: int, seed: int, hidden: int | None = None,
                scale_clamp: float = DEFAULT_SCALE_CLAMP) -> FlowModel:
    """Fresh flow that is exactly the identity map.

    Even layers pass the first ceil(p/2) coordinates, odd layers the
    complement, so every coordinate is transformed whenever n_layers >= 2.
    Hidden weights are random (seeded); output layers start at zero.
    """
    if p < 2 or n_layers < 1:
        raise ValidationError(f"need p >= 2 and n_layers >= 1, got {(p, n_layers)}")
    width = hidden_width(p) if hidden is None else int(hidden)
    rng = np.random.default_rng(seed)
    first = np.arange(int(np.ceil(p / 2)))
    second = np.arange(first.size, p)
    layers = []
    for k in range(n_layers):
        pass_idx, trans_idx = (first, second) if k % 2 == 0 else (second, first)
        scale_net = SmallNet(pass_idx.size, width, trans_idx.size, rng)
        shift_net = SmallNet(pass_idx.size, width, trans_idx.size, rng)
        layers.append(CouplingLayer(pass_idx, trans_idx, scale_net, shift_net,
                                    scale_clamp, index=k))
    return FlowModel(layers, p)


def log_likelihood(flow: FlowModel, x, base: GaussianParams):
    """Data-space log-density via the change of variables through inverse()."""
    z, log_det = flow.inverse(x)
    return log_density(z, base) + log_det


def masked_reconstruction_error(reconstructed: np.ndarray, current: np.ndarray,
                                masks: np.ndarray) -> np.ndarray:
    """Per-row squared error over observed (mask=0) cells only."""
    residual = np.where(np.asarray(masks, dtype=bool), 0.0,
                        reconstructed - current)
    return np.sum(residual * residual, axis=1)


def nll_loss(flow: FlowModel, batch: np.ndarray, base: GaussianParams) -> float:
    """Negative mean log-likelihood of a batch."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValidationError("empty batch")
    return float(-np.mean(log_likelihood(flow, batch, base)))


def composite_loss(reconstructed: np.ndarray, current: np.ndarray,
                   masks: np.ndarray, flow: FlowModel, base: GaussianParams,
                   recon_weight: float) -> float:
    """Negative mean of (log-likelihood - weighted observed-cell error)."""
    if recon_weight < 0:
        raise ValidationError("recon_weight must be non-negative")
    reconstructed = np.atleast_2d(np.asarray(reconstructed, dtype=np.float64))
    current = np.atleast_2d(np.asarray(current, dtype=np.float64))
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    if not (reconstructed.shape == current.shape == masks.shape):
        raise ValidationError("reconstructed/current/masks shapes disagree")
    ll = log_likelihood(flow, reconstructed, base)
    rec = masked_reconstruction_error(reconstructed, current, masks)
    return float(-np.mean(ll - recon_weight * rec))


def nll_loss_and_grads(flow: FlowModel, batch: np.ndarray, base: GaussianParams):
    """Loss value plus exact gradients w.r.t. every network parameter."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    B = batch.shape[0]
    if B == 0:
        raise ValidationError("empty batch")
    z, log_det, caches = flow.inverse_cached(batch)
    centered = z - base.mean
    # alpha = Sigma^{-1} (z - mu), reused for both the value and the gradient
    alpha = cho_solve((base.chol, True), centered.T).T
    quad = np.sum(centered * alpha, axis=1)
    log_det_cov = 2.0 * np.sum(np.log(np.diag(base.chol)))
    ll = -0.5 * (flow.dim * np.log(2.0 * np.pi) + log_det_cov + quad) + log_det
    loss = float(-np.mean(ll))
    d_z = alpha / B
    d_log_det = np.full(B, -1.0 / B)
    grads = flow.backward_inverse_chain(caches, d_z, d_log_det)
    return loss, grads


def composite_loss_and_grads(flow: FlowModel, latent: np.ndarray,
                             current: np.ndarray, masks: np.ndarray,
                             base: GaussianParams, recon_weight: float):
    """Composite loss on reconstructions decoded from ``latent``.

    The reconstruction x~ = forward(latent) is a function of the flow
    parameters, so gradients flow through the decoder; the latent rows are
    treated as constants. Because the inverse is exact, the log-likelihood of
    x~ collapses to log N(latent; base) minus the forward log-determinant,
    which is the identity the backward pass uses.
    """
    if recon_weight < 0:
        raise ValidationError("recon_weight must be non-negative")
    latent = np.atleast_2d(np.asarray(latent, dtype=np.float64))
    current = np.atleast_2d(np.asarray(current, dtype=np.float64))
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    if not (latent.shape == current.shape == masks.shape):
        raise ValidationError("latent/current/masks shapes disagree")
    B = latent.shape[0]
    reconstructed, log_det_fwd, caches = flow.forward_cached(latent)
    ll = log_density(latent, base) - log_det_fwd
    observed = ~masks
    residual = np.where(observed, reconstructed - current, 0.0)
    rec = np.sum(residual * residual, axis=1)
    loss = float(-np.mean(ll - recon_weight * rec))
    d_recon = (2.0 * recon_weight / B) * residual
    d_log_det = np.full(B, 1.0 / B)
    grads = flow.backward_forward_chain(caches, d_recon, d_log_det)
    return loss, grads, reconstructed


def _checked_step(flow: FlowModel, optimizer: Adam, loss: float,
                  grads: list[np.ndarray]) -> None:
    if not np.isfinite(loss):
        raise NonFiniteError(f"loss is not finite ({loss})")
    per_layer = len(grads) // flow.n_layers
    for k in range(flow.n_layers):
        for g in grads[k * per_layer:(k + 1) * per_layer]:
            if not np.isfinite(g).all():
                raise NonFiniteError("non-finite gradient", layer_index=k)
    optimizer.step(flow.parameters(), grads)


def nll_grad_step(flow: FlowModel, batch: np.ndarray, base: GaussianParams,
                  optimizer: Adam) -> float:
    """One optimizer step on the negative log-likelihood loss."""
    loss, grads = nll_loss_and_grads(flow, batch, base)
    _checked_step(flow, optimizer, loss, grads)
    return loss


def composite_grad_step(flow: FlowModel, latent: np.ndarray, current: np.ndarray,
                        masks: np.ndarray, base: GaussianParams,
                        recon_weight: float, optimizer: Adam) -> float:
    """One optimizer step on the composite reconstruction loss."""
    loss, grads, _ = composite_loss_and_grads(flow, latent, current, masks,
                                              base, recon_weight)
    _checked_step(flow, optimizer, loss, grads)
    return loss


def save_flow(path, flow: FlowModel, base: GaussianParams | None = None) -> None:
    """Write a bit-exact flow checkpoint (npz: arrays + JSON header)."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "dim": flow.dim,
        "n_layers": flow.n_layers,
        "scale_clamp": [layer.scale_clamp for layer in flow.layers],
        "has_base": base is not None,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    names = ("W1", "b1", "W2", "b2", "W3", "b3")
    for k, layer in enumerate(flow.layers):
        arrays[f"layer{k}_pass_idx"] = layer.pass_idx
        arrays[f"layer{k}_transform_idx"] = layer.transform_idx
        for net_name, net in (("scale", layer.scale_net), ("shift", layer.shift_net)):
            for name, arr in zip(names, net.params):
                arrays[f"layer{k}_{net_name}_{name}"] = arr
    if base is not None:
        arrays["base_mean"] = base.mean
        arrays["base_cov"] = base.cov
    np.savez(path, **arrays)


def load_flow(path) -> tuple[FlowModel, GaussianParams | None]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {meta['version']}")
        rng = np.random.default_rng(0)
        layers = []
        for k in range(meta["n_layers"]):
            pass_idx = data[f"layer{k}_pass_idx"]
            trans_idx = data[f"layer{k}_transform_idx"]
            nets = []
            for net_name in ("scale", "shift"):
                W1 = data[f"layer{k}_{net_name}_W1"]
                net = SmallNet(W1.shape[0], W1.shape[1],
                               data[f"layer{k}_{net_name}_W3"].shape[1], rng)
                net.set_params([data[f"layer{k}_{net_name}_{nm}"]
                                for nm in ("W1", "b1", "W2", "b2", "W3", "b3")])
                nets.append(net)
            layers.append(CouplingLayer(pass_idx, trans_idx, nets[0], nets[1],
                                        meta["scale_clamp"][k], index=k))
        flow = FlowModel(layers, meta["dim"])
        base = None
        if meta["has_base"]:
            base = GaussianParams(data["base_mean"], data["base_cov"])
    return flow, base
