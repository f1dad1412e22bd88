"""Neural pricer: (latent surface code, k, T) -> normalized option price.

One MLP per instrument kind, fed the 10 encoder means plus the two
instrument inputs (12 features). Stage 2 trains the MLP against oracle
prices with the encoder frozen; stage 3 fine-tunes encoder and MLP
jointly under the same pricing loss, leaving the decoder untouched.
Latents are recomputed from the referenced surface on every batch so
fine-tuning gradients reach the encoder, and inference always uses the
deterministic means (no sampling).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, NumericError, ParseError
from .market_data import SurfaceDataset, VolSurface
from .tensor_nn import (
    AdamState,
    Array,
    CosineSchedule,
    Dense,
    LeakyReLU,
    cosine_lr,
    load_params,
    save_params,
)
from .vae import TrainLog, VaeModel, apply_adam, encode

KINDS = ("american_put", "asian_call", "asian_put")

_INIT_STREAM = 21
_SHUFFLE_STREAM = 22


@dataclass(frozen=True)
class PriceRecord:
    """One oracle-priced sample tied to a dataset surface."""

    surface_id: int
    kind: str
    k: float
    expiry: float
    rate: float
    price: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.surface_id < 0:
            raise DomainError(f"surface_id must be >= 0, got {self.surface_id}")
        if not all(math.isfinite(v) for v in (self.k, self.expiry, self.rate,
                                              self.price)):
            raise DomainError("non-finite record field")
        if self.price < 0:
            raise DomainError(f"price must be >= 0, got {self.price}")
        cap = math.exp(self.k) if self.kind == "american_put" \
            else 1.0 + math.exp(self.k)
        if self.price > cap + 1e-9:
            raise DomainError(f"{self.kind} price {self.price} above bound {cap}")


class PricerModel:
    """MLP with 12 inputs, hidden widths (64, 64, 32), scalar output."""

    INPUT_DIM_INSTRUMENT = 2  # k and T appended to the latent means

    def __init__(self, latent_dim: int = 10,
                 hidden: tuple[int, ...] = (64, 64, 32), seed: int = 0):
        self.latent_dim = latent_dim
        self.hidden = tuple(hidden)
        self.input_dim = latent_dim + self.INPUT_DIM_INSTRUMENT
        rng = np.random.default_rng((seed, _INIT_STREAM))
        dims = [self.input_dim, *hidden, 1]
        self.layers = []
        for i in range(len(dims) - 1):
            self.layers.append(Dense(dims[i], dims[i + 1], rng, f"mlp.fc{i + 1}"))
            if i < len(dims) - 2:
                self.layers.append(LeakyReLU(name=f"mlp.act{i + 1}"))

    def forward(self, features: Array) -> Array:
        out = features
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def backward(self, grad: Array) -> Array:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out

    def gradients(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for layer in self.layers:
            out.update(layer.gradients())
        return out

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def save(self, path: str | Path) -> None:
        entries = {"meta.mlp": np.array([self.latent_dim, *self.hidden],
                                        dtype=np.float64)}
        entries.update(self.parameters())
        save_params(path, entries)

    @classmethod
    def load(cls, path: str | Path) -> "PricerModel":
        entries = load_params(path)
        meta = entries.pop("meta.mlp")
        model = cls(latent_dim=int(meta[0]),
                    hidden=tuple(int(h) for h in meta[1:]), seed=0)
        for name, arr in model.parameters().items():
            arr[...] = entries[name]
        return model


def mlp_price(model: PricerModel, latent_mu: Array, k: float, expiry: float) -> float:
    """Deterministic normalized price from latent means and (k, T)."""
    mu = np.asarray(latent_mu, dtype=np.float64).reshape(-1)
    if mu.shape != (model.latent_dim,):
        raise DomainError(f"latent must have {model.latent_dim} entries, "
                          f"got {mu.shape}")
    features = np.concatenate([mu, [k, expiry]])[None, :]
    out = float(model.forward(features)[0, 0])
    if not math.isfinite(out):
        raise NumericError("pricer produced a non-finite value")
    return out


def mlp_loss(model: PricerModel, features: Array, targets: Array) -> float:
    """Mean squared pricing error over a batch."""
    if len(features) == 0:
        raise DomainError("mlp_loss needs a non-empty batch")
    pred = model.forward(np.asarray(features, dtype=np.float64))[:, 0]
    return float(np.mean((pred - np.asarray(targets, dtype=np.float64)) ** 2))


def _batch_features(vae_model: VaeModel, dataset: SurfaceDataset,
                    records: list[PriceRecord]) -> tuple[Array, Array, Array]:
    """Encoder pass for a record batch -> (mu, features, targets); the
    encoder caches stay live so callers may backprop through them."""
    vols = np.stack([dataset.surfaces[r.surface_id].vols for r in records])
    x = vae_model.normalize(vols)[:, None, :, :]
    mu, _ = vae_model.forward_stats(x)
    inst = np.array([[r.k, r.expiry] for r in records])
    features = np.concatenate([mu, inst], axis=1)
    targets = np.array([r.price for r in records])
    return mu, features, targets


def records_loss(vae_model: VaeModel, mlp: PricerModel, dataset: SurfaceDataset,
                  records: list[PriceRecord], batch_size: int = 256) -> float:
    total = 0.0
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        _, features, targets = _batch_features(vae_model, dataset, chunk)
        total += mlp_loss(mlp, features, targets) * len(chunk)
    return total / len(records)


def _train_stage(vae_model: VaeModel, mlp: PricerModel, dataset: SurfaceDataset,
                 train_records: list[PriceRecord],
                 test_records: list[PriceRecord], epochs: int,
                 schedule: CosineSchedule, seed: int, batch_size: int,
                 train_encoder: bool) -> TrainLog:
    if epochs < 0:
        raise DomainError(f"epochs must be >= 0, got {epochs}")
    if not train_records:
        raise DomainError("no training records")
    log = TrainLog()
    if epochs == 0:
        return log
    params = dict(mlp.parameters())
    if train_encoder:
        params.update(vae_model.encoder_params())
    state = AdamState.for_params(params)

    for epoch in range(1, epochs + 1):
        lr = cosine_lr(schedule, epoch - 1)
        order = np.random.default_rng(
            (seed, _SHUFFLE_STREAM, epoch)).permutation(len(train_records))
        batch_losses = []
        for start in range(0, len(order), batch_size):
            batch = [train_records[i] for i in order[start:start + batch_size]]
            mlp.zero_grad()
            if train_encoder:
                vae_model.zero_grad()
            _, features, targets = _batch_features(vae_model, dataset, batch)
            pred = mlp.forward(features)[:, 0]
            resid = pred - targets
            loss = float(np.mean(resid ** 2))
            if not np.isfinite(loss):
                raise NumericError(f"pricer loss diverged at epoch {epoch}")
            grad_features = mlp.backward(
                (2.0 * resid / len(resid))[:, None])
            if train_encoder:
                vae_model.backward_stats(
                    grad_features[:, :vae_model.latent_dim], None)
            grads = dict(mlp.gradients())
            if train_encoder:
                grads.update(vae_model.gradients())
                grads = {name: grads[name] for name in params}
            state = apply_adam(params, grads, state, lr)
            batch_losses.append(loss)
        train_loss = float(np.mean(batch_losses))
        test_loss = (records_loss(vae_model, mlp, dataset, test_records)
                     if test_records else float("nan"))
        log.rows.append((epoch, train_loss, test_loss, lr))
    return log


def train_mlp(mlp: PricerModel, vae_model: VaeModel, dataset: SurfaceDataset,
              train_records: list[PriceRecord], test_records: list[PriceRecord],
              epochs: int, schedule: CosineSchedule, seed: int,
              batch_size: int = 32) -> TrainLog:
    """Stage 2: only the MLP parameters move; the encoder is frozen."""
    return _train_stage(vae_model, mlp, dataset, train_records, test_records,
                        epochs, schedule, seed, batch_size, train_encoder=False)


def fine_tune(vae_model: VaeModel, mlp: PricerModel, dataset: SurfaceDataset,
              train_records: list[PriceRecord], test_records: list[PriceRecord],
              epochs: int, schedule: CosineSchedule, seed: int,
              batch_size: int = 32) -> TrainLog:
    """Stage 3: encoder and MLP optimized jointly under the pricing loss;
    decoder parameters stay untouched."""
    return _train_stage(vae_model, mlp, dataset, train_records, test_records,
                        epochs, schedule, seed, batch_size, train_encoder=True)


def predict_price(vae_model: VaeModel, mlp: PricerModel, surface: VolSurface,
                  strike: float, expiry: float, spot: float = 1.0) -> float:
    """Currency price: spot * mlp_price at k = log(strike/spot).

    One encoder pass plus one MLP pass; no sampling anywhere.
    """
    if strike <= 0 or spot <= 0:
        raise DomainError("strike and spot must be positive")
    k = math.log(strike / spot)
    tol = 1e-12
    if not (surface.k_axis[0] - tol <= k <= surface.k_axis[-1] + tol):
        raise DomainError(f"k={k:.6g} outside the surface grid")
    if not (surface.t_axis[0] - tol <= expiry <= surface.t_axis[-1] + tol):
        raise DomainError(f"T={expiry:.6g} outside the surface grid")
    stats = encode(vae_model, surface)
    return spot * mlp_price(mlp, stats.mu, k, expiry)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalSummary:
    kind: str
    n_records: int
    mae: float
    rmse: float
    r_squared: float
    max_abs_err: float
    max_err_k: float
    max_err_t: float
    mean_signed_err: float


def evaluate_records(vae_model: VaeModel, mlp: PricerModel,
                     dataset: SurfaceDataset, records: list[PriceRecord]
                     ) -> tuple[list[tuple], EvalSummary]:
    """Per-record oracle-vs-predicted rows plus the summary statistics."""
    if not records:
        raise DomainError("no records to evaluate")
    rows = []
    preds = np.empty(len(records))
    for start in range(0, len(records), 256):
        chunk = records[start:start + 256]
        _, features, _ = _batch_features(vae_model, dataset, chunk)
        preds[start:start + len(chunk)] = mlp.forward(features)[:, 0]
    targets = np.array([r.price for r in records])
    errs = preds - targets
    for r, pred, err in zip(records, preds, errs):
        rows.append((r.kind, r.k, r.expiry, r.price, float(pred), float(err)))
    ss_res = float((errs ** 2).sum())
    ss_tot = float(((targets - targets.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    worst = int(np.argmax(np.abs(errs)))
    summary = EvalSummary(
        kind=records[0].kind,
        n_records=len(records),
        mae=float(np.abs(errs).mean()),
        rmse=float(np.sqrt((errs ** 2).mean())),
        r_squared=max(0.0, min(1.0, r2)),
        max_abs_err=float(np.abs(errs[worst])),
        max_err_k=records[worst].k,
        max_err_t=records[worst].expiry,
        mean_signed_err=float(errs.mean()),
    )
    return rows, summary


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

RECORD_HEADER = ["surface_id", "kind", "k", "T", "rate", "price"]
EVAL_HEADER = ["kind", "k", "T", "oracle_price", "predicted_price", "err"]


def write_price_records(records: list[PriceRecord], path: str | Path) -> None:
    lines = [",".join(RECORD_HEADER)]
    for r in records:
        lines.append(f"{r.surface_id},{r.kind},{r.k!r},{r.expiry!r},"
                     f"{r.rate!r},{r.price!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_price_records(path: str | Path) -> list[PriceRecord]:
    path = Path(path)
    records = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RECORD_HEADER:
            raise ParseError(f"{path}: bad record header {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                records.append(PriceRecord(
                    surface_id=int(row[0]), kind=row[1], k=float(row[2]),
                    expiry=float(row[3]), rate=float(row[4]),
                    price=float(row[5])))
            except (ValueError, IndexError, DomainError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}", line=lineno) from exc
    return records


def write_evaluation_csv(rows: list[tuple], path: str | Path) -> None:
    lines = [",".join(EVAL_HEADER)]
    for kind, k, t, oracle, pred, err in rows:
        lines.append(f"{kind},{k!r},{t!r},{oracle!r},{pred!r},{err!r}")
    Path(path).write_text("\n".join(lines) + "\n")
