"""
Conditional VAE over normalized daily profiles.

The loss is reconstruction MSE + lambda_mmd * MMD(aggregated posterior batch, N(0, I) batch)
+ lambda_q * batch quantile matching at the 5th, 50th and 95th percentiles.
Gradients are assembled by hand on top of nn_core.

After training, a per-period Gaussian observation noise is fitted in normalized space: its
variance is whatever the decoded training set is missing from the real per-period variance.
Generation samples it on top of the decoder output.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from loadsynth.config import TrainConfig
from loadsynth.exceptions import DatasetError, ShapeMismatchError, TrainingDivergedError
from loadsynth.services.nn_core import (
    Activation,
    AdamState,
    DenseNet,
    SeedLike,
    adam_step,
    as_generator,
)
from loadsynth.services.profile_store import (
    LABEL_DIM,
    N_PERIODS,
    Dataset,
    NormalizationParams,
    fit_normalization,
    split_holdout,
)

logger = logging.getLogger(__name__)

QUANTILES: Tuple[float, ...] = (0.05, 0.50, 0.95)
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
MIN_QUANTILE_BATCH = 8


@dataclass(frozen=True)
class LossWeights:
    mmd: float = 1.0
    quantile: float = 1.0


class CvaeModel:
    def __init__(
        self,
        encoder: DenseNet,
        decoder: DenseNet,
        latent_dim: int,
        normalization: NormalizationParams,
        loss_weights: LossWeights = LossWeights(),
        label_dim: int = LABEL_DIM,
        output_noise: Optional[np.ndarray] = None,
    ):
        if encoder.in_features != N_PERIODS + label_dim or encoder.out_features != 2 * latent_dim:
            raise ShapeMismatchError(
                f"encoder must map {N_PERIODS + label_dim} -> {2 * latent_dim}, got {encoder.sizes}"
            )
        if decoder.in_features != latent_dim + label_dim or decoder.out_features != N_PERIODS:
            raise ShapeMismatchError(
                f"decoder must map {latent_dim + label_dim} -> {N_PERIODS}, got {decoder.sizes}"
            )
        self.encoder = encoder
        self.decoder = decoder
        self.latent_dim = latent_dim
        self.label_dim = label_dim
        self.normalization = normalization
        self.loss_weights = loss_weights
        self.quantiles = QUANTILES
        self.output_noise = output_noise

    @property
    def output_noise(self) -> np.ndarray:
        """Per-period standard deviation of the observation noise, in normalized units."""
        return self._output_noise

    @output_noise.setter
    def output_noise(self, value: Optional[np.ndarray]):
        noise = np.zeros(N_PERIODS) if value is None else np.array(value, dtype=np.float64)
        if noise.shape != (N_PERIODS,) or not np.all(np.isfinite(noise)) or np.any(noise < 0):
            raise ShapeMismatchError(f"output noise must be {N_PERIODS} finite non-negative values")
        noise.setflags(write=False)
        self._output_noise = noise

    @classmethod
    def create(
        cls,
        normalization: NormalizationParams,
        latent_dim: int = 16,
        encoder_hidden: Sequence[int] = (128, 64),
        decoder_hidden: Sequence[int] = (64, 128),
        activation: Activation = Activation.RELU,
        loss_weights: LossWeights = LossWeights(),
        seed: SeedLike = 0,
    ) -> "CvaeModel":
        rng = as_generator(seed)
        encoder = DenseNet.initialize(
            [N_PERIODS + LABEL_DIM, *encoder_hidden, 2 * latent_dim], activation, seed=rng
        )
        decoder = DenseNet.initialize(
            [latent_dim + LABEL_DIM, *decoder_hidden, N_PERIODS], activation, seed=rng
        )
        return cls(encoder, decoder, latent_dim, normalization, loss_weights)

    def parameters(self) -> List[np.ndarray]:
        return self.encoder.parameters() + self.decoder.parameters()

    def copy(self) -> "CvaeModel":
        return CvaeModel(
            self.encoder.copy(), self.decoder.copy(), self.latent_dim,
            self.normalization, self.loss_weights, self.label_dim, self.output_noise,
        )


def _check_batch(name: str, array: np.ndarray, width: int, rows: Optional[int] = None) -> np.ndarray:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 2 or array.shape[1] != width or (rows is not None and array.shape[0] != rows):
        raise ShapeMismatchError(f"{name}: expected shape (B, {width}), got {array.shape}")
    return array


def _encode_raw(m: CvaeModel, x: np.ndarray, y: np.ndarray):
    x = _check_batch("profiles", x, N_PERIODS)
    y = _check_batch("labels", y, m.label_dim, rows=x.shape[0])
    raw, cache = m.encoder.forward_cached(np.hstack([x, y]))
    return raw, cache


def encode(m: CvaeModel, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    raw, _ = _encode_raw(m, x, y)
    z = m.latent_dim
    return raw[:, :z], np.clip(raw[:, z:], LOGVAR_MIN, LOGVAR_MAX)


def reparameterize(mu: np.ndarray, logvar: np.ndarray, seed: SeedLike) -> np.ndarray:
    mu, logvar = np.asarray(mu, dtype=np.float64), np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ShapeMismatchError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    eps = as_generator(seed).standard_normal(mu.shape)
    return mu + np.exp(0.5 * logvar) * eps


def decode(m: CvaeModel, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = _check_batch("latents", z, m.latent_dim)
    y = _check_batch("labels", y, m.label_dim, rows=z.shape[0])
    return m.decoder.forward(np.hstack([z, y]))


def encode_latents(m: CvaeModel, x: np.ndarray, y: np.ndarray, seed: SeedLike) -> np.ndarray:
    """Samples from the aggregated posterior: one reparameterised draw per profile."""
    mu, logvar = encode(m, x, y)
    return reparameterize(mu, logvar, seed)


def fit_output_noise(m: CvaeModel, x: np.ndarray, y: np.ndarray, seed: SeedLike) -> np.ndarray:
    """
    Per-period noise standard deviation that tops the variance of the decoded profiles up to
    the variance of x; zero where the decoder already spreads as much as the data
    """
    x = _check_batch("profiles", x, N_PERIODS)
    decoded = decode(m, encode_latents(m, x, y, seed), y)
    return np.sqrt(np.maximum(x.var(axis=0) - decoded.var(axis=0), 0.0))


# --- MMD -----------------------------------------------------------------------------------------

def default_bandwidths(dim: int, multipliers: Sequence[float] = (0.5, 1.0, 2.0, 4.0, 8.0)) -> Tuple[float, ...]:
    return tuple(b * np.sqrt(dim) for b in multipliers)


def rbf_kernel_sum(a: np.ndarray, b: np.ndarray, bandwidths: Sequence[float]) -> np.ndarray:
    sq = cdist(a, b, "sqeuclidean")
    return sum(np.exp(-sq / (2.0 * s * s)) for s in bandwidths)


def mmd_from_kernels(kxx: np.ndarray, kyy: np.ndarray, kxy: np.ndarray) -> float:
    m, n = kxx.shape[0], kyy.shape[0]
    xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(xx + yy - 2.0 * kxy.mean())


def _mmd_with_gradient(a: np.ndarray, b: np.ndarray, bandwidths: Sequence[float]) -> Tuple[float, np.ndarray, bool]:
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise ShapeMismatchError("MMD needs at least two samples on each side")
    sq_xx, sq_yy, sq_xy = cdist(a, a, "sqeuclidean"), cdist(b, b, "sqeuclidean"), cdist(a, b, "sqeuclidean")
    kxx, kyy, kxy = np.zeros_like(sq_xx), np.zeros_like(sq_yy), np.zeros_like(sq_xy)
    wxx, wxy = np.zeros_like(sq_xx), np.zeros_like(sq_xy)
    for s in bandwidths:
        s2 = s * s
        exx, exy = np.exp(-sq_xx / (2.0 * s2)), np.exp(-sq_xy / (2.0 * s2))
        kxx += exx
        kxy += exy
        kyy += np.exp(-sq_yy / (2.0 * s2))
        wxx += exx / s2
        wxy += exy / s2
    value = mmd_from_kernels(kxx, kyy, kxy)
    if value <= 0.0:
        return 0.0, np.zeros_like(a), False
    grad = -(2.0 / (m * (m - 1))) * (wxx.sum(axis=1)[:, None] * a - wxx @ a)
    grad += (2.0 / (m * n)) * (wxy.sum(axis=1)[:, None] * a - wxy @ b)
    return value, grad, True


def mmd_loss(z_batch: np.ndarray, prior_batch: np.ndarray, bandwidths: Sequence[float]) -> float:
    """Unbiased MMD^2 with a sum of RBF kernels, clamped at zero."""
    a, b = np.asarray(z_batch, dtype=np.float64), np.asarray(prior_batch, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ShapeMismatchError("MMD needs at least two samples on each side")
    value = mmd_from_kernels(
        rbf_kernel_sum(a, a, bandwidths), rbf_kernel_sum(b, b, bandwidths), rbf_kernel_sum(a, b, bandwidths)
    )
    return max(value, 0.0)


# --- quantiles -----------------------------------------------------------------------------------

def _quantile_positions(n: int, q: float) -> Tuple[int, int, float]:
    position = (n - 1) * q
    lo = int(np.floor(position))
    hi = min(lo + 1, n - 1)
    return lo, hi, position - lo


def empirical_quantiles(x: np.ndarray, quantiles: Sequence[float]) -> np.ndarray:
    """Linear-interpolation quantiles over the batch axis, one row per quantile."""
    s = np.sort(np.asarray(x, dtype=np.float64), axis=0)
    rows = []
    for q in quantiles:
        lo, hi, frac = _quantile_positions(s.shape[0], q)
        rows.append(s[lo] + frac * (s[hi] - s[lo]))
    return np.vstack(rows)


def _quantile_loss_with_gradient(x: np.ndarray, x_hat: np.ndarray, quantiles: Sequence[float]):
    b, t = x_hat.shape
    if b < MIN_QUANTILE_BATCH:
        raise ShapeMismatchError(f"quantile loss needs a batch of at least {MIN_QUANTILE_BATCH}, got {b}")
    target = empirical_quantiles(x, quantiles)
    order = np.argsort(x_hat, axis=0, kind="stable")
    columns = np.arange(t)
    norm = t * len(quantiles)
    grad = np.zeros_like(x_hat)
    value, pattern = 0.0, []
    for k, q in enumerate(quantiles):
        lo, hi, frac = _quantile_positions(b, q)
        lo_rows, hi_rows = order[lo], order[hi]
        estimate = x_hat[lo_rows, columns] + frac * (x_hat[hi_rows, columns] - x_hat[lo_rows, columns])
        diff = estimate - target[k]
        value += np.abs(diff).sum() / norm
        sign = np.sign(diff) / norm
        np.add.at(grad, (lo_rows, columns), sign * (1.0 - frac))
        np.add.at(grad, (hi_rows, columns), sign * frac)
        pattern.extend((lo_rows.astype(np.int32).tobytes(), hi_rows.astype(np.int32).tobytes(),
                        np.packbits(diff > 0).tobytes()))
    return float(value), grad, b"".join(pattern)


def quantile_loss(x: np.ndarray, x_hat: np.ndarray, quantiles: Sequence[float] = QUANTILES) -> float:
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape[1:] != x_hat.shape[1:]:
        raise ShapeMismatchError(f"x {x.shape} and x_hat {x_hat.shape} differ in width")
    if x.shape[0] < MIN_QUANTILE_BATCH:
        raise ShapeMismatchError(f"quantile loss needs a batch of at least {MIN_QUANTILE_BATCH}")
    return _quantile_loss_with_gradient(x, x_hat, quantiles)[0]


# --- total loss ----------------------------------------------------------------------------------

@dataclass(frozen=True)
class LossComponents:
    reconstruction: float
    mmd: float
    quantile: float
    total: float

    @classmethod
    def mean(cls, items: Sequence["LossComponents"], weights: Sequence[float]) -> "LossComponents":
        w = np.asarray(weights, dtype=float) / np.sum(weights)
        return cls(*(float(np.dot(w, [getattr(i, f) for i in items]))
                     for f in ("reconstruction", "mmd", "quantile", "total")))


def combine_losses(
    x: np.ndarray,
    x_hat: np.ndarray,
    z: np.ndarray,
    prior: np.ndarray,
    cfg: TrainConfig,
) -> LossComponents:
    reconstruction = float(np.mean((x_hat - x) ** 2))
    mmd = mmd_loss(z, prior, cfg.bandwidths())
    quantile = quantile_loss(x, x_hat)
    total = reconstruction + cfg.lambda_mmd * mmd + cfg.lambda_q * quantile
    return LossComponents(reconstruction, mmd, quantile, total)


@dataclass
class LossEvaluation:
    components: LossComponents
    gradients: List[np.ndarray] = field(default_factory=list)
    # identifies the smooth piece of the loss surface (relu masks, clamps, order statistics)
    region: bytes = b""


def evaluate_loss(
    m: CvaeModel,
    x: np.ndarray,
    y: np.ndarray,
    seed: SeedLike,
    cfg: TrainConfig,
    with_gradients: bool = True,
) -> LossEvaluation:
    raw, enc_cache = _encode_raw(m, x, y)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    zdim = m.latent_dim
    mu, raw_logvar = raw[:, :zdim], raw[:, zdim:]
    logvar = np.clip(raw_logvar, LOGVAR_MIN, LOGVAR_MAX)

    rng = as_generator(seed)
    eps = rng.standard_normal(mu.shape)
    prior = rng.standard_normal(mu.shape)
    std = np.exp(0.5 * logvar)
    z = mu + std * eps

    x_hat, dec_cache = m.decoder.forward_cached(np.hstack([z, y]))
    residual = x_hat - x
    reconstruction = float(np.mean(residual ** 2))
    mmd, d_mmd, mmd_active = _mmd_with_gradient(z, prior, cfg.bandwidths())
    quantile, d_quantile, quantile_region = _quantile_loss_with_gradient(x, x_hat, QUANTILES)
    total = reconstruction + cfg.lambda_mmd * mmd + cfg.lambda_q * quantile
    components = LossComponents(reconstruction, mmd, quantile, total)

    clamped = (raw_logvar < LOGVAR_MIN) | (raw_logvar > LOGVAR_MAX)
    region = b"".join((
        m.encoder.activation_pattern(enc_cache),
        m.decoder.activation_pattern(dec_cache),
        np.packbits(clamped).tobytes(),
        quantile_region,
        bytes([mmd_active]),
    ))
    if not with_gradients:
        return LossEvaluation(components, [], region)

    d_xhat = 2.0 * residual / residual.size + cfg.lambda_q * d_quantile
    dec_grads, d_dec_in = m.decoder.backward(dec_cache, d_xhat)
    dz = d_dec_in[:, :zdim] + cfg.lambda_mmd * d_mmd
    d_logvar = dz * eps * 0.5 * std * ~clamped
    enc_grads, _ = m.encoder.backward(enc_cache, np.hstack([dz, d_logvar]))
    return LossEvaluation(components, enc_grads + dec_grads, region)


def total_loss(
    m: CvaeModel, x: np.ndarray, y: np.ndarray, seed: SeedLike, cfg: TrainConfig
) -> Tuple[float, LossComponents]:
    components = evaluate_loss(m, x, y, seed, cfg, with_gradients=False).components
    return components.total, components


# --- training ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train: LossComponents
    validation: LossComponents


@dataclass
class TrainingResult:
    model: CvaeModel
    log: List[EpochRecord]
    best_epoch: int


def _chunks(n_rows: int, batch_size: int, order: Optional[np.ndarray] = None) -> List[np.ndarray]:
    index = np.arange(n_rows) if order is None else order
    return np.array_split(index, max(1, n_rows // batch_size))


def validation_loss(m: CvaeModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> LossComponents:
    chunks = _chunks(len(x), cfg.batch_size)
    results = [
        evaluate_loss(m, x[idx], y[idx], cfg.seed + i, cfg, with_gradients=False).components
        for i, idx in enumerate(chunks)
    ]
    return LossComponents.mean(results, [len(idx) for idx in chunks])


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    normalization: Optional[NormalizationParams] = None,
) -> TrainingResult:
    """
    Adam on the total loss; keeps the parameters with the best validation total and stops after
    `patience` epochs without improvement
    """
    if len(dataset) == 0:
        raise DatasetError("cannot train on an empty dataset")
    if normalization is None:
        normalization = fit_normalization(dataset)
    fit_set, val_set = split_holdout(dataset, cfg.validation_fraction, cfg.seed)
    if len(fit_set) < MIN_QUANTILE_BATCH or len(val_set) < MIN_QUANTILE_BATCH:
        raise DatasetError(
            f"need at least {MIN_QUANTILE_BATCH} training and validation profiles, "
            f"got {len(fit_set)} and {len(val_set)}"
        )

    x, y = normalization.normalize(fit_set.readings), np.asarray(fit_set.onehot)
    x_val, y_val = normalization.normalize(val_set.readings), np.asarray(val_set.onehot)

    rng = np.random.default_rng(cfg.seed)
    model = CvaeModel.create(
        normalization,
        latent_dim=cfg.latent_dim,
        encoder_hidden=cfg.encoder_hidden,
        decoder_hidden=cfg.decoder_hidden,
        activation=Activation(cfg.activation),
        loss_weights=LossWeights(cfg.lambda_mmd, cfg.lambda_q),
        seed=rng,
    )
    params = model.parameters()
    state = AdamState.for_params(params, learning_rate=cfg.learning_rate)

    logger.info(
        f"Training CVAE on {len(fit_set)} profiles ({len(val_set)} validation), "
        f"Z={cfg.latent_dim}, batch={cfg.batch_size}, epochs={cfg.epochs}"
    )
    log: List[EpochRecord] = []
    best_model, best_total, best_epoch = model.copy(), np.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        batches = _chunks(len(x), cfg.batch_size, rng.permutation(len(x)))
        batch_losses = []
        for b, idx in enumerate(batches, 1):
            evaluation = evaluate_loss(model, x[idx], y[idx], int(rng.integers(2**63 - 1)), cfg)
            if not np.isfinite(evaluation.components.total):
                raise TrainingDivergedError(epoch, b, evaluation.components.total)
            adam_step(params, evaluation.gradients, state)
            batch_losses.append(evaluation.components)
        train_components = LossComponents.mean(batch_losses, [len(idx) for idx in batches])
        val_components = validation_loss(model, x_val, y_val, cfg)
        if not np.isfinite(val_components.total):
            raise TrainingDivergedError(epoch, 0, val_components.total)
        log.append(EpochRecord(epoch, train_components, val_components))
        logger.info(
            f"epoch {epoch}: train mse={train_components.reconstruction:.4f} "
            f"mmd={train_components.mmd:.4f} q={train_components.quantile:.4f} | "
            f"val total={val_components.total:.4f}"
        )

        if val_components.total < best_total:
            best_model, best_total, best_epoch = model.copy(), val_components.total, epoch
        elif epoch - best_epoch >= cfg.patience:
            logger.info(f"Early stop at epoch {epoch}; best epoch {best_epoch}")
            break

    best_model.output_noise = fit_output_noise(best_model, x, y, cfg.seed)
    logger.info(
        f"Best epoch {best_epoch}; observation noise std "
        f"{best_model.output_noise.min():.3f}..{best_model.output_noise.max():.3f} (normalized)"
    )
    return TrainingResult(best_model, log, best_epoch)
