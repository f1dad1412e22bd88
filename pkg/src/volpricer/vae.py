"""Convolutional variational autoencoder over volatility surfaces.

Encoder: two strided conv layers (1->16->32 channels), flatten, and two
linear heads producing 10 latent means and 10 log-variances. Decoder is
the exact mirror through transposed convolutions. Reconstruction
averages the decoder output over independent reparameterized samples
(10 by default), and the training loss is the mean squared error
between input and averaged reconstruction; an optional KL term can be
switched on (off by default, matching the observed log-variance
collapse of the pure reconstruction objective).

Sampling streams are keyed by (seed, stream tag, epoch, surface index)
so losses are batch-order invariant and every run is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, NumericError, ShapeError
from .market_data import SurfaceDataset, VolSurface
from .tensor_nn import (
    AdamState,
    Array,
    Conv2d,
    ConvTranspose2d,
    CosineSchedule,
    Dense,
    Flatten,
    LeakyReLU,
    Reshape,
    adam_step,
    cosine_lr,
    load_params,
    save_params,
)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 2.0

# Stream tags for derived RNG seeds.
_INIT_STREAM = 11
_EPS_STREAM = 12
_SHUFFLE_STREAM = 13


@dataclass(frozen=True)
class LatentStats:
    """Latent Gaussian parameters: means and log-variances (2*log s)."""

    mu: np.ndarray
    log_var: np.ndarray

    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_var, LOGVAR_MIN, LOGVAR_MAX) / 2.0)


def reparameterize(stats: LatentStats, eps: np.ndarray) -> np.ndarray:
    """z = mu + exp(log_var / 2) * eps for standard-normal draws eps."""
    return stats.mu + stats.std() * eps


class VaeModel:
    """Encoder + decoder pair with seeded initialization."""

    def __init__(self, input_hw: tuple[int, int] = (41, 20), latent_dim: int = 10,
                 channels: tuple[int, int] = (16, 32), seed: int = 0,
                 norm_mean: float = 0.0, norm_std: float = 1.0):
        if latent_dim < 1:
            raise DomainError(f"latent_dim must be >= 1, got {latent_dim}")
        self.input_hw = tuple(input_hw)
        self.latent_dim = latent_dim
        self.channels = tuple(channels)
        self.norm_mean = float(norm_mean)
        self.norm_std = float(norm_std)
        if self.norm_std <= 0:
            raise DomainError("norm_std must be positive")

        rng = np.random.default_rng((seed, _INIT_STREAM))
        c1, c2 = self.channels
        self.conv1 = Conv2d(1, c1, rng, "encoder.conv1")
        self.act1 = LeakyReLU(name="encoder.act1")
        self.conv2 = Conv2d(c1, c2, rng, "encoder.conv2")
        self.act2 = LeakyReLU(name="encoder.act2")
        self.flatten = Flatten(name="encoder.flatten")

        h0, w0 = self.input_hw
        h1, w1 = self.conv1.output_hw(h0, w0)
        h2, w2 = self.conv2.output_hw(h1, w1)
        self.shape_trace = [(h0, w0), (h1, w1), (h2, w2)]
        self.flat_dim = c2 * h2 * w2

        self.mu_head = Dense(self.flat_dim, latent_dim, rng, "encoder.mu")
        self.logvar_head = Dense(self.flat_dim, latent_dim, rng, "encoder.logvar")

        def invert(src: tuple[int, int], dst: tuple[int, int]) -> tuple[int, int]:
            return tuple(dst[i] - ((src[i] - 1) * 2 - 2 + 3) for i in range(2))

        self.dec_dense = Dense(latent_dim, self.flat_dim, rng, "decoder.dense")
        self.dec_act0 = LeakyReLU(name="decoder.act0")
        self.dec_reshape = Reshape((c2, h2, w2), name="decoder.reshape")
        self.tconv1 = ConvTranspose2d(c2, c1, rng, "decoder.tconv1",
                                      output_padding=invert((h2, w2), (h1, w1)))
        self.dec_act1 = LeakyReLU(name="decoder.act1")
        self.tconv2 = ConvTranspose2d(c1, 1, rng, "decoder.tconv2",
                                      output_padding=invert((h1, w1), (h0, w0)))

    # -- parameter bookkeeping ------------------------------------------

    def encoder_layers(self):
        return [self.conv1, self.conv2, self.mu_head, self.logvar_head]

    def decoder_layers(self):
        return [self.dec_dense, self.tconv1, self.tconv2]

    def encoder_params(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for layer in self.encoder_layers():
            out.update(layer.parameters())
        return out

    def decoder_params(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for layer in self.decoder_layers():
            out.update(layer.parameters())
        return out

    def parameters(self) -> dict[str, Array]:
        return {**self.encoder_params(), **self.decoder_params()}

    def gradients(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for layer in self.encoder_layers() + self.decoder_layers():
            out.update(layer.gradients())
        return out

    def zero_grad(self) -> None:
        for layer in self.encoder_layers() + self.decoder_layers():
            layer.zero_grad()

    # -- forward / backward ---------------------------------------------

    def normalize(self, vols: Array) -> Array:
        return (vols - self.norm_mean) / self.norm_std

    def forward_stats(self, x: Array) -> tuple[Array, Array]:
        """Batched encoder pass: [B, 1, H, W] -> (mu, log_var), caching."""
        if x.ndim != 4 or x.shape[2:] != self.input_hw:
            raise ShapeError(f"encoder expects [B, 1, {self.input_hw[0]}, "
                             f"{self.input_hw[1]}], got {x.shape}")
        t = self.act1.forward(self.conv1.forward(x))
        t = self.act2.forward(self.conv2.forward(t))
        t = self.flatten.forward(t)
        return self.mu_head.forward(t), self.logvar_head.forward(t)

    def backward_stats(self, grad_mu: Array | None,
                       grad_logvar: Array | None) -> None:
        """Backward through the encoder given head gradients (either may
        be None when that head is not on the loss path)."""
        if grad_mu is None and grad_logvar is None:
            raise DomainError("at least one head gradient is required")
        grad_trunk = None
        if grad_mu is not None:
            grad_trunk = self.mu_head.backward(grad_mu)
        if grad_logvar is not None:
            g = self.logvar_head.backward(grad_logvar)
            grad_trunk = g if grad_trunk is None else grad_trunk + g
        g = self.flatten.backward(grad_trunk)
        g = self.conv2.backward(self.act2.backward(g))
        self.conv1.backward(self.act1.backward(g))

    def forward_decoder(self, z: Array) -> Array:
        """Batched decoder pass: [B, latent] -> [B, 1, H, W] raw vols."""
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"decoder expects [B, {self.latent_dim}], got {z.shape}")
        t = self.dec_act0.forward(self.dec_dense.forward(z))
        t = self.dec_reshape.forward(t)
        t = self.dec_act1.forward(self.tconv1.forward(t))
        y = self.tconv2.forward(t)
        return y * self.norm_std + self.norm_mean

    def backward_decoder(self, grad_y: Array) -> Array:
        g = self.tconv2.backward(grad_y * self.norm_std)
        g = self.tconv1.backward(self.dec_act1.backward(g))
        g = self.dec_reshape.backward(g)
        return self.dec_dense.backward(self.dec_act0.backward(g))

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        entries = {"meta.vae": np.array([*self.input_hw, self.latent_dim,
                                         *self.channels, self.norm_mean,
                                         self.norm_std], dtype=np.float64)}
        entries.update(self.parameters())
        save_params(path, entries)

    @classmethod
    def load(cls, path: str | Path) -> "VaeModel":
        entries = load_params(path)
        meta = entries.pop("meta.vae")
        model = cls(input_hw=(int(meta[0]), int(meta[1])), latent_dim=int(meta[2]),
                    channels=(int(meta[3]), int(meta[4])), seed=0,
                    norm_mean=float(meta[5]), norm_std=float(meta[6]))
        for name, arr in model.parameters().items():
            arr[...] = entries[name]
        return model


def _as_input_array(surface: VolSurface | Array) -> Array:
    vols = surface.vols if isinstance(surface, VolSurface) else np.asarray(surface)
    return vols.astype(np.float64)


def encode(model: VaeModel, surface: VolSurface | Array) -> LatentStats:
    """Deterministic latent stats for one surface."""
    vols = _as_input_array(surface)
    x = model.normalize(vols)[None, None, :, :]
    mu, logvar = model.forward_stats(x)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))):
        raise NumericError("encoder heads produced non-finite latent stats")
    return LatentStats(mu=mu[0].copy(), log_var=logvar[0].copy())


def reconstruct(model: VaeModel, surface: VolSurface | Array, n_samples: int = 10,
                rng: np.random.Generator | None = None,
                eps: Array | None = None) -> Array:
    """Mean of n_samples decoder outputs from reparameterized draws.

    Pass either an rng (draws are taken from it) or an explicit eps
    array of shape [n_samples, latent_dim].
    """
    if n_samples < 1:
        raise DomainError(f"n_samples must be >= 1, got {n_samples}")
    stats = encode(model, surface)
    if eps is None:
        if rng is None:
            raise DomainError("reconstruct needs an rng or explicit eps draws")
        eps = rng.standard_normal((n_samples, model.latent_dim))
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (n_samples, model.latent_dim):
        raise ShapeError(f"eps must be [{n_samples}, {model.latent_dim}], "
                         f"got {eps.shape}")
    z = stats.mu[None, :] + stats.std()[None, :] * eps
    decoded = model.forward_decoder(z)
    out = decoded.mean(axis=0)[0]
    if not np.all(np.isfinite(out)):
        raise NumericError("decoder produced non-finite reconstruction")
    return out


def surface_eps(seed: int, epoch: int, surface_index: int, n_samples: int,
                latent_dim: int) -> Array:
    """The per-surface sampling stream: keyed by (seed, epoch, index)."""
    rng = np.random.default_rng((seed, _EPS_STREAM, epoch, surface_index))
    return rng.standard_normal((n_samples, latent_dim))


def _kl_divergence(mu: Array, logvar: Array) -> float:
    lv = np.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)
    per_surface = -0.5 * np.sum(1.0 + lv - mu ** 2 - np.exp(lv), axis=1)
    return float(per_surface.mean())

def _batch_forward(model: VaeModel, vols: Array, eps: Array):
    """Shared forward pass: returns (loss pieces and intermediates)."""
    b, n_samples = eps.shape[0], eps.shape[1]
    x = model.normalize(vols)[:, None, :, :]
    mu, logvar = model.forward_stats(x)
    lv = np.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)
    std = np.exp(lv / 2.0)
    z = mu[:, None, :] + std[:, None, :] * eps
    decoded = model.forward_decoder(z.reshape(b * n_samples, -1))
    h, w = model.input_hw
    recon = decoded.reshape(b, n_samples, 1, h, w).mean(axis=1)
    resid = recon - vols[:, None, :, :]
    mse = float((resid ** 2).mean())
    return mse, mu, logvar, std, resid


def vae_loss(model: VaeModel, surfaces: list[VolSurface], indices: list[int],
             seed: int, epoch: int, n_samples: int = 10,
             kl_beta: float = 0.0, batch_size: int = 64) -> float:
    """Mean over surfaces of the pixel-mean squared reconstruction error
    (plus kl_beta times the KL term when enabled); evaluation only."""
    if not surfaces:
        raise DomainError("vae_loss needs a non-empty batch")
    total, count = 0.0, 0
    for start in range(0, len(surfaces), batch_size):
        chunk = surfaces[start:start + batch_size]
        idx = indices[start:start + batch_size]
        vols = np.stack([_as_input_array(s) for s in chunk])
        eps = np.stack([surface_eps(seed, epoch, i, n_samples, model.latent_dim)
                        for i in idx])
        mse, mu, logvar, _, _ = _batch_forward(model, vols, eps)
        piece = mse + (kl_beta * _kl_divergence(mu, logvar) if kl_beta > 0 else 0.0)
        total += piece * len(chunk)
        count += len(chunk)
    return total / count


def _train_batch(model: VaeModel, vols: Array, eps: Array,
                 kl_beta: float) -> float:
    """Forward + backward for one batch; leaves gradients accumulated."""
    b, n_samples = eps.shape[0], eps.shape[1]
    h, w = model.input_hw
    mse, mu, logvar, std, resid = _batch_forward(model, vols, eps)
    loss = mse

    grad_recon = 2.0 * resid / resid.size           # [B, 1, H, W]
    grad_decoded = np.repeat(grad_recon[:, None] / n_samples, n_samples, axis=1)
    grad_z = model.backward_decoder(
        grad_decoded.reshape(b * n_samples, 1, h, w)).reshape(b, n_samples, -1)

    grad_mu = grad_z.sum(axis=1)
    clamp_mask = (logvar > LOGVAR_MIN) & (logvar < LOGVAR_MAX)
    grad_logvar = 0.5 * std * (grad_z * eps).sum(axis=1) * clamp_mask

    if kl_beta > 0:
        loss += kl_beta * _kl_divergence(mu, logvar)
        grad_mu = grad_mu + kl_beta * mu / b
        lv = np.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)
        grad_logvar = grad_logvar + kl_beta * (-0.5) * (1.0 - np.exp(lv)) \
            * clamp_mask / b

    model.backward_stats(grad_mu, grad_logvar)
    return loss


@dataclass
class TrainLog:
    """Per-epoch history; row = (epoch, train_loss, test_loss, lr)."""

    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        lines = ["epoch,train_loss,test_loss,lr"]
        for epoch, train, test, lr in self.rows:
            lines.append(f"{epoch},{train!r},{test!r},{lr!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @property
    def final_train_loss(self) -> float:
        return self.rows[-1][1]


def apply_adam(params: dict[str, Array], grads: dict[str, Array],
               state: AdamState, lr: float) -> AdamState:
    """adam_step + write-back into the live parameter buffers."""
    new_params, new_state = adam_step(params, grads, state, lr)
    for name, arr in params.items():
        arr[...] = new_params[name]
    return new_state


def train_vae(model: VaeModel, dataset: SurfaceDataset, epochs: int,
              schedule: CosineSchedule, seed: int, batch_size: int = 32,
              n_samples: int = 10, kl_beta: float = 0.0) -> TrainLog:
    """Stage-1 training on the train split; returns the per-epoch log.

    The logged train loss is the mean of batch losses seen during the
    epoch; the test loss is a full evaluation pass with that epoch's
    sampling streams. Raises NumericError if the loss diverges.
    """
    if epochs < 0:
        raise DomainError(f"epochs must be >= 0, got {epochs}")
    log = TrainLog()
    if epochs == 0:
        return log
    params = model.parameters()
    state = AdamState.for_params(params)
    train_idx = list(dataset.train_indices)
    test_surfaces = dataset.test_surfaces()
    test_idx = list(dataset.test_indices)

    for epoch in range(1, epochs + 1):
        lr = cosine_lr(schedule, epoch - 1)
        order = np.random.default_rng(
            (seed, _SHUFFLE_STREAM, epoch)).permutation(len(train_idx))
        batch_losses = []
        for start in range(0, len(order), batch_size):
            ids = [train_idx[i] for i in order[start:start + batch_size]]
            vols = np.stack([_as_input_array(dataset.surfaces[i]) for i in ids])
            eps = np.stack([surface_eps(seed, epoch, i, n_samples,
                                        model.latent_dim) for i in ids])
            model.zero_grad()
            loss = _train_batch(model, vols, eps, kl_beta)
            if not np.isfinite(loss):
                raise NumericError(f"VAE loss diverged at epoch {epoch}")
            state = apply_adam(params, model.gradients(), state, lr)
            batch_losses.append(loss)
        train_loss = float(np.mean(batch_losses))
        if test_surfaces:
            test_loss = vae_loss(model, test_surfaces, test_idx, seed, epoch,
                                 n_samples, kl_beta)
        else:
            test_loss = float("nan")
        log.rows.append((epoch, train_loss, test_loss, lr))
    return log
