"""Speckle-to-phase inverse model with adversarial forward-consistency.

Three subnetworks share the workload: an encoder maps a speckle image
to a phase pattern (the inverse problem), a generator maps phases back
to speckle (the forward map), and a patch discriminator judges real
against generated speckle on a grid of local decisions.  Four loss
terms drive training:

* deviation  - squared error between predicted and true phases;
* distribution - Gaussian KL between the moments of predicted and true
  phase batches, keeping the predicted code distribution honest;
* content    - squared error between discriminator hidden features of a
  real speckle and its encode/decode reconstruction;
* style      - the three-way adversarial value: real speckle scored up,
  generated speckle from true and from predicted phases scored down.

Gradient flow is gated per subnetwork: the encoder never receives the
style signal, the discriminator never receives the content signal, and
each update treats the other subnetworks as fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .core_sim import PhasePattern, ShapeError, SpecklePattern, quantize_phases
from .dataset_io import PairDataset, load_named_tensors, save_named_tensors
from .rng import make_rng

MODES = ("full", "enc_only", "no_dis", "no_content")
_MODE_ALIASES = {"no_dis_loss": "no_dis", "no_content_loss": "no_content"}

_CLAMP = 1e-7
_VAR_FLOOR = 1e-8


class TrainingDivergedError(RuntimeError):
    """Deviation loss blew past 10x its initial value for 3 straight epochs."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class LossWeights:
    """Per-term update weights: encoder gets (dev, dis, content), the
    generator gets content_gen alongside its adversarial terms."""

    dev: float = 22.0
    dis: float = 0.03
    content: float = 0.03
    content_gen: float = 1e-6

    def __post_init__(self):
        for name in ("dev", "dis", "content", "content_gen"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"loss weight {name} must be nonnegative")


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown ablation mode {mode!r}, expected one of {MODES}")
    return mode


@dataclass
class LoftganModel:
    speckle_side: int
    phase_side: int
    seed: int
    enc: nn.Network
    gen: nn.Network
    dis: nn.Network
    content_tap: int

    @property
    def phase_size(self) -> int:
        return self.phase_side * self.phase_side

    def all_params(self) -> dict[str, np.ndarray]:
        out = {}
        for net in (self.enc, self.gen, self.dis):
            out.update(net.store.params)
        return out


def build_model(speckle_side: int, phase_side: int, seed: int) -> LoftganModel:
    """Assemble encoder/generator/discriminator for the given grid sizes.

    Encoder: conv 16@7x7/s3, 32@5x5/s2, 48@3x3/s1 (same padding, relu),
    dense 512, dropout 0.5, dense to the phase length with a sigmoid.
    The generator mirrors it with two dense layers and three
    resize+conv stages back to the speckle shape; the discriminator
    repeats the encoder's conv stack, then three 3x3 convs collapse the
    channels to a sigmoid patch grid.  Glorot-uniform init, one PCG64
    stream, so a seed pins every initial parameter.
    """
    if speckle_side < 8 or phase_side < 8:
        raise ValueError(
            f"grid sides must be >= 8 (the conv stride chain needs them), "
            f"got speckle {speckle_side}, phase {phase_side}"
        )
    rng = make_rng(seed)
    s1 = -(-speckle_side // 3)
    s2 = -(-s1 // 2)
    phase_size = phase_side * phase_side

    enc = nn.Network(
        "enc",
        [
            nn.Conv2D("enc/conv1", 16, 7, stride=3),
            nn.Activation("enc/act1", "relu"),
            nn.Conv2D("enc/conv2", 32, 5, stride=2),
            nn.Activation("enc/act2", "relu"),
            nn.Conv2D("enc/conv3", 48, 3, stride=1),
            nn.Activation("enc/act3", "relu"),
            nn.Flatten("enc/flat"),
            nn.Dense("enc/dense1", 512),
            nn.Activation("enc/act4", "relu"),
            nn.Dropout("enc/drop", 0.5),
            nn.Dense("enc/dense2", phase_size),
            nn.Activation("enc/out", "sigmoid"),
        ],
        in_shape=(speckle_side, speckle_side, 1),
        seed_rng=rng,
    )
    gen = nn.Network(
        "gen",
        [
            nn.Dense("gen/dense1", 512),
            nn.Activation("gen/act1", "relu"),
            nn.Dense("gen/dense2", s2 * s2 * 48),
            nn.Activation("gen/act2", "relu"),
            nn.Reshape("gen/reshape", (s2, s2, 48)),
            nn.Conv2D("gen/conv1", 32, 3, stride=1),
            nn.Activation("gen/act3", "relu"),
            nn.ResizeNearest("gen/up1", (s1, s1)),
            nn.Conv2D("gen/conv2", 16, 5, stride=1),
            nn.Activation("gen/act4", "relu"),
            nn.ResizeNearest("gen/up2", (speckle_side, speckle_side)),
            nn.Conv2D("gen/conv3", 1, 7, stride=1),
            nn.Activation("gen/out", "sigmoid"),
        ],
        in_shape=(phase_size,),
        seed_rng=rng,
    )
    dis = nn.Network(
        "dis",
        [
            nn.Conv2D("dis/conv1", 16, 7, stride=3),
            nn.Activation("dis/act1", "relu"),
            nn.Conv2D("dis/conv2", 32, 5, stride=2),
            nn.Activation("dis/act2", "relu"),
            nn.Conv2D("dis/conv3", 48, 3, stride=1),
            nn.Activation("dis/act3", "relu"),  # content features tap
            nn.Conv2D("dis/conv4", 16, 3, stride=1),
            nn.Activation("dis/act4", "relu"),
            nn.Conv2D("dis/conv5", 4, 3, stride=1),
            nn.Activation("dis/act5", "relu"),
            nn.Conv2D("dis/conv6", 1, 3, stride=1),
            nn.Activation("dis/out", "sigmoid"),
        ],
        in_shape=(speckle_side, speckle_side, 1),
        seed_rng=rng,
    )
    return LoftganModel(
        speckle_side=speckle_side,
        phase_side=phase_side,
        seed=seed,
        enc=enc,
        gen=gen,
        dis=dis,
        content_tap=5,
    )


# ---------------------------------------------------------------------------
# losses


def loss_dev(x_pred: np.ndarray, x_true: np.ndarray) -> float:
    """Squared Frobenius deviation, averaged over the batch."""
    if x_pred.shape != x_true.shape:
        raise ShapeError(f"shape mismatch {x_pred.shape} vs {x_true.shape}")
    b = x_pred.shape[0]
    return float(np.sum((x_pred - x_true) ** 2) / b)


def _dev_grad(x_pred, x_true):
    b = x_pred.shape[0]
    return loss_dev(x_pred, x_true), 2.0 * (x_pred - x_true) / b


def loss_dis(x_pred: np.ndarray, x_true: np.ndarray) -> float:
    """Gaussian KL between batch moments of the predicted and true phases.

    Fits a normal to all elements of each batch and evaluates
    KL(N(mu~, var~) || N(mu, var)); variances are floored at 1e-8 so
    degenerate batches stay finite.
    """
    return _dis_grad(x_pred, x_true)[0]


def _dis_grad(x_pred, x_true):
    if x_pred.size == 0 or x_true.size == 0:
        raise ValueError("empty batch")
    k = x_pred.size
    mu_p, var_p = float(np.mean(x_pred)), float(np.var(x_pred))
    mu_t, var_t = float(np.mean(x_true)), float(np.var(x_true))
    vp = max(var_p, _VAR_FLOOR)
    vt = max(var_t, _VAR_FLOOR)
    value = 0.5 * math.log(vt / vp) + (vp + (mu_p - mu_t) ** 2) / (2.0 * vt) - 0.5
    d_mu = (mu_p - mu_t) / vt
    d_var = (-0.5 / vp + 0.5 / vt) if var_p >= _VAR_FLOOR else 0.0
    grad = d_mu / k + d_var * 2.0 * (x_pred - mu_p) / k
    return float(value), grad


def _clamped_log_grads(d, toward_one):
    """Mean log-likelihood term and its gradient w.r.t. the raw scores.

    toward_one=True contributes mean(log d); False contributes
    mean(log(1 - d)).  Scores are clamped to [1e-7, 1 - 1e-7] and the
    gradient vanishes where the clamp is active.
    """
    k = d.size
    dc = np.clip(d, _CLAMP, 1.0 - _CLAMP)
    inside = (d > _CLAMP) & (d < 1.0 - _CLAMP)
    if toward_one:
        value = float(np.mean(np.log(dc)))
        grad = np.where(inside, 1.0 / dc, 0.0) / k
    else:
        value = float(np.mean(np.log(1.0 - dc)))
        grad = np.where(inside, -1.0 / (1.0 - dc), 0.0) / k
    return value, grad


def loss_style(d_real: np.ndarray, d_fake_from_x: np.ndarray, d_fake_from_enc: np.ndarray) -> float:
    """Three-way adversarial value over the patch grids.

    mean log(real score) + mean log(1 - score of speckle generated from
    the true phase) + mean log(1 - score of the encode/decode
    reconstruction).  The discriminator ascends this; the generator
    descends the two fake terms.
    """
    v1, _ = _clamped_log_grads(d_real, True)
    v2, _ = _clamped_log_grads(d_fake_from_x, False)
    v3, _ = _clamped_log_grads(d_fake_from_enc, False)
    return v1 + v2 + v3


def loss_content(h_real: np.ndarray, h_fake: np.ndarray) -> float:
    """Half squared distance between discriminator features, batch-averaged."""
    if h_real.shape != h_fake.shape:
        raise ShapeError(f"shape mismatch {h_real.shape} vs {h_fake.shape}")
    b = h_real.shape[0]
    return float(0.5 * np.sum((h_real - h_fake) ** 2) / b)


def _content_grad(h_real, h_fake):
    b = h_real.shape[0]
    return loss_content(h_real, h_fake), (h_fake - h_real) / b


def adversarial_loss(d_real: np.ndarray, d_fake: np.ndarray) -> float:
    """Classic two-term GAN value (reference only; training uses loss_style)."""
    v1, _ = _clamped_log_grads(d_real, True)
    v2, _ = _clamped_log_grads(d_fake, False)
    return v1 + v2


def histogram_kl(x_pred: np.ndarray, x_true: np.ndarray, bins: int = 32) -> float:
    """Discrete KL between 32-bin histograms on [0, 1]; evaluation only."""
    hp, _ = np.histogram(x_pred, bins=bins, range=(0.0, 1.0))
    ht, _ = np.histogram(x_true, bins=bins, range=(0.0, 1.0))
    p = (hp + 1e-12) / (hp.sum() + bins * 1e-12)
    q = (ht + 1e-12) / (ht.sum() + bins * 1e-12)
    return float(np.sum(p * np.log(p / q)))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class StepReport:
    l_dev: float
    l_dis: float
    l_content: float
    l_style: float


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch: int = 32
    lr: float = 1e-4
    mode: str = "full"
    seed: int = 0
    val_split: float = 0.1
    optimizer: str = "adam"
    weights: LossWeights = field(default_factory=LossWeights)
    # Validation deviation loss cannot separate a good inverse from a
    # degenerate one (the medium ignores a global phase shift of the
    # pattern, so held-out regression error is floored); the final-epoch
    # parameters are therefore the default output, with the best-
    # validation snapshot kept alongside.
    restore_best: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", normalize_mode(self.mode))
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch < 1:
            raise ValueError("batch must be positive")
        if not 0.0 < self.val_split < 1.0:
            raise ValueError("val_split must be in (0, 1)")


@dataclass
class TrainResult:
    model: LoftganModel
    history: list[dict]
    best_epoch: int
    best_val: float
    best_params: dict[str, dict[str, np.ndarray]]


def _batch_inputs(model, phases, speckles):
    b = len(phases)
    x = phases.reshape(b, model.phase_size)
    y = speckles.reshape(b, model.speckle_side, model.speckle_side, 1)
    return x, y


def train_step(
    model: LoftganModel,
    x: np.ndarray,
    y: np.ndarray,
    weights: LossWeights,
    mode: str,
    rng,
    optimizers: dict[str, object],
    update_parts: tuple[str, ...] | None = None,
) -> StepReport:
    """One gated update on a minibatch (x phases (B, P^2), y speckles NHWC).

    All gradients are computed from the same forward state before any
    parameter moves.  The encoder descends its weighted deviation /
    distribution / content sum; the generator descends its content term
    plus the fake-sample log terms of the style value (the minimax
    descent direction); the discriminator ascends the style value.
    `update_parts` restricts which subnetworks actually step (used by
    gating diagnostics); by default the ablation mode decides.
    """
    mode = normalize_mode(mode)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"batch sizes differ: {x.shape[0]} vs {y.shape[0]}")
    w_dev = weights.dev
    w_dis = 0.0 if mode == "no_dis" else weights.dis
    w_con = 0.0 if mode == "no_content" else weights.content
    w_con_gen = 0.0 if mode == "no_content" else weights.content_gen
    if update_parts is None:
        update_parts = ("enc",) if mode == "enc_only" else ("enc", "gen", "dis")

    b = x.shape[0]
    tap = model.content_tap
    x_pred, enc_caches, _ = model.enc.forward(y, train=True, rng=rng)
    # single generator pass over both phase sources, single discriminator
    # pass over [real, reconstruction, from-true-phase]; per-sample ops make
    # the concatenation exact
    y_gen, gen_caches, _ = model.gen.forward(np.concatenate([x_pred, x]), train=True)
    y_tilde, y_hat = y_gen[:b], y_gen[b:]
    d_all, dis_caches, taps_all = model.dis.forward(
        np.concatenate([y, y_tilde, y_hat]), taps=(tap,)
    )
    d_real, d_tilde, d_hat = d_all[:b], d_all[b : 2 * b], d_all[2 * b :]
    h_all = taps_all[tap]

    l_dev, g_dev = _dev_grad(x_pred, x)
    l_dis, g_dis = _dis_grad(x_pred, x)
    l_con, g_con = _content_grad(h_all[:b], h_all[b : 2 * b])
    s_real, g_sty_real = _clamped_log_grads(d_real, True)
    s_hat, g_sty_hat = _clamped_log_grads(d_hat, False)
    s_tilde, g_sty_tilde = _clamped_log_grads(d_tilde, False)
    l_style = s_real + s_hat + s_tilde

    report = StepReport(l_dev=l_dev, l_dis=l_dis, l_content=l_con, l_style=l_style)
    for name, val in (("dev", l_dev), ("dis", l_dis), ("content", l_con), ("style", l_style)):
        if not math.isfinite(val):
            raise nn.NumericFaultError(
                f"loss {name} is not finite; report={report}, "
                f"param norms enc={model.enc.store.l2_norms()}"
            )

    mode_is_enc_only = mode == "enc_only"
    need_content_chain = (w_con > 0.0 or w_con_gen > 0.0) and not mode_is_enc_only
    zeros_patch = np.zeros_like(d_all)

    dy_tilde_con = None
    if need_content_chain:
        inj = np.zeros_like(h_all)
        inj[b : 2 * b] = g_con
        dy_tilde_con = model.dis.backward_from(tap, inj, dis_caches, accumulate=False)[
            b : 2 * b
        ]

    if "enc" in update_parts:
        dx = w_dev * g_dev + w_dis * g_dis
        if w_con > 0.0 and dy_tilde_con is not None:
            dy_gen_in = np.concatenate([dy_tilde_con, np.zeros_like(dy_tilde_con)])
            dx = dx + w_con * model.gen.backward(dy_gen_in, gen_caches, accumulate=False)[:b]
        model.enc.store.zero_grads()
        model.enc.backward(dx, enc_caches, accumulate=True)
        optimizers["enc"].step(model.enc.store)

    if "gen" in update_parts and not mode_is_enc_only:
        d_fakes = zeros_patch.copy()
        d_fakes[b : 2 * b] = g_sty_tilde
        d_fakes[2 * b :] = g_sty_hat
        dy_fakes = model.dis.backward(d_fakes, dis_caches, accumulate=False)
        dy_tilde = dy_fakes[b : 2 * b]
        if w_con_gen > 0.0 and dy_tilde_con is not None:
            dy_tilde = dy_tilde + w_con_gen * dy_tilde_con
        model.gen.store.zero_grads()
        model.gen.backward(
            np.concatenate([dy_tilde, dy_fakes[2 * b :]]), gen_caches, accumulate=True
        )
        optimizers["gen"].step(model.gen.store)

    if "dis" in update_parts and not mode_is_enc_only:
        d_ascent = np.concatenate([-g_sty_real, -g_sty_tilde, -g_sty_hat])
        model.dis.store.zero_grads()
        model.dis.backward(d_ascent, dis_caches, accumulate=True)
        optimizers["dis"].step(model.dis.store)

    return report


def _validation_dev(model, phases, speckles):
    x, y = _batch_inputs(model, phases, speckles)
    x_pred, _, _ = model.enc.forward(y, train=False)
    return loss_dev(x_pred, x)


def train(model: LoftganModel, dataset: PairDataset, config: TrainConfig) -> TrainResult:
    """Epoch loop with seeded shuffling and best-validation tracking.

    The tail `val_split` fraction of the dataset is held out; after each
    epoch the validation deviation loss is logged and the best-scoring
    parameter snapshot is retained in the result (and restored into the
    model when `restore_best` is set).  Aborts if the training deviation
    loss exceeds 10x its first-epoch value for 3 consecutive epochs.
    """
    n = len(dataset)
    n_val = max(1, int(round(config.val_split * n)))
    n_train = n - n_val
    if n_train < 1:
        raise ValueError(f"no training samples left after split ({n} total)")
    tr_p, tr_s = dataset.phases[:n_train], dataset.speckles[:n_train]
    va_p, va_s = dataset.phases[n_train:], dataset.speckles[n_train:]

    rng = make_rng(config.seed)
    weights = config.weights
    optimizers = {
        part: nn.make_optimizer(config.optimizer, config.lr)
        for part in ("enc", "gen", "dis")
    }

    best_params = {
        "enc": model.enc.store.copy_params(),
        "gen": model.gen.store.copy_params(),
        "dis": model.dis.store.copy_params(),
    }
    best_val = math.inf
    best_epoch = 0
    history: list[dict] = []
    initial_dev = None
    over_budget_streak = 0

    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n_train)
        sums = np.zeros(4)
        n_steps = 0
        for lo in range(0, n_train, config.batch):
            idx = perm[lo : lo + config.batch]
            x, y = _batch_inputs(model, tr_p[idx], tr_s[idx])
            try:
                rep = train_step(model, x, y, weights, config.mode, rng, optimizers)
            except nn.NumericFaultError as e:
                raise nn.NumericFaultError(
                    f"step failed at epoch {epoch}: {e}"
                ) from e
            sums += (rep.l_dev, rep.l_dis, rep.l_content, rep.l_style)
            n_steps += 1
        means = sums / n_steps
        val_dev = _validation_dev(model, va_p, va_s)
        history.append(
            {
                "epoch": epoch,
                "l_dev": float(means[0]),
                "l_dis": float(means[1]),
                "l_content": float(means[2]),
                "l_style": float(means[3]),
                "val_l_dev": float(val_dev),
            }
        )
        if val_dev < best_val:
            best_val = val_dev
            best_epoch = epoch
            best_params = {
                "enc": model.enc.store.copy_params(),
                "gen": model.gen.store.copy_params(),
                "dis": model.dis.store.copy_params(),
            }
        if initial_dev is None:
            initial_dev = means[0]
        over_budget_streak = over_budget_streak + 1 if means[0] > 10.0 * initial_dev else 0
        if over_budget_streak >= 3:
            raise TrainingDivergedError(
                f"deviation loss {means[0]:.4g} stayed above 10x its initial "
                f"value {initial_dev:.4g} for 3 epochs",
                history,
            )

    if config.restore_best:
        model.enc.store.load_params(best_params["enc"])
        model.gen.store.load_params(best_params["gen"])
        model.dis.store.load_params(best_params["dis"])
    return TrainResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_val=best_val,
        best_params=best_params,
    )


def write_history_csv(history: list[dict], path):
    cols = ["epoch", "l_dev", "l_dis", "l_content", "l_style", "val_l_dev"]
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for row in history:
            f.write(
                ",".join(
                    str(row[c]) if c == "epoch" else repr(float(row[c])) for c in cols
                )
                + "\n"
            )


def predict_phase(
    model: LoftganModel, target: SpecklePattern, quantize_levels: int | None = None
) -> PhasePattern:
    """Encode a desired focus pattern into the phase that should realize it.

    Runs the encoder in eval mode (dropout off); optionally snaps the
    result onto the modulator's grey-level grid.
    """
    side = model.speckle_side
    if target.n_modes != side * side:
        raise ShapeError(
            f"target has {target.n_modes} modes, model expects {side * side}"
        )
    if target.flat.max() > 1.0 + 1e-12:
        raise ValueError("target must be normalized to [0, 1]")
    y = target.flat.reshape(1, side, side, 1)
    x_pred, _, _ = model.enc.forward(y, train=False)
    values = np.clip(x_pred.reshape(model.phase_side, model.phase_side), 0.0, 1.0)
    if quantize_levels is not None:
        return PhasePattern(values=quantize_phases(values, quantize_levels), levels=quantize_levels)
    return PhasePattern(values=values)


def reconstruct(model: LoftganModel, speckles: np.ndarray) -> np.ndarray:
    """Eval-mode round trip Gen(Enc(y)) for a (B, S, S) speckle stack."""
    b = speckles.shape[0]
    y = speckles.reshape(b, model.speckle_side, model.speckle_side, 1)
    x_pred, _, _ = model.enc.forward(y, train=False)
    y_rec, _, _ = model.gen.forward(x_pred, train=False)
    return y_rec.reshape(speckles.shape)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: LoftganModel, path):
    items = {
        "meta": (
            np.zeros(0),
            {
                "speckle_side": str(model.speckle_side),
                "phase_side": str(model.phase_side),
                "seed": str(model.seed),
            },
        )
    }
    for name, arr in model.all_params().items():
        items[name] = (arr.astype("<f8"), {})
    save_named_tensors(path, items)


def load_checkpoint(path) -> LoftganModel:
    blocks = load_named_tensors(path)
    _, meta = blocks.pop("meta")
    model = build_model(
        int(meta["speckle_side"]), int(meta["phase_side"]), int(meta["seed"])
    )
    for net in (model.enc, model.gen, model.dis):
        prefix = net.name + "/"
        net.store.load_params(
            {k: v for k, (v, _) in blocks.items() if k.startswith(prefix)}
        )
    return model
