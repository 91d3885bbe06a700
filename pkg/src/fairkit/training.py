"""Training loop and the at-training-time debiasing methods.

Methods: Standard, the adversarial family (Adv, EAdv, DAdv, AAdv, ADAdv),
Gate (group-specific additive heads), FairBatch (dynamic batch
distribution), FairSCL (contrastive terms), and EO_CLA (loss-gap penalty).
Setting a method's trade-off hyperparameter to zero reproduces the
Standard trajectory bit-exactly under the same seed (FairBatch keeps its
initial sampling distribution instead).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Batch, BatchPlan, Dataset, make_batches
from .errors import (
    ContrastiveDegenerateError,
    FairbatchCollapseError,
    LabelDomainError,
    ShapeError,
    TrainingDivergedError,
)
from .evaluation import evaluate_predictions

METHODS = ("Standard", "Adv", "EAdv", "DAdv", "AAdv", "ADAdv",
           "Gate", "FairBatch", "FairSCL", "EO_CLA")

_ADV_FAMILY = {"Adv", "EAdv", "DAdv", "AAdv", "ADAdv"}


@dataclass
class MethodConfig:
    method: str = "Standard"
    adv_lambda: float = 0.0
    n_discriminators: int = 1
    diff_lambda: float = 0.0
    fairbatch_alpha: float = 0.0
    fcl_lambda_y: float = 0.0
    fcl_lambda_g: float = 0.0
    eo_cla_lambda: float = 0.0
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-3
    optimizer: str = "adam"
    hidden_dims: tuple[int, ...] = (16,)
    disc_hidden_dims: tuple[int, ...] = (16,)
    activation: str = "relu"
    temperature: float = 0.07

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.n_discriminators < 1:
            raise ValueError("n_discriminators must be >= 1")
        for name in ("adv_lambda", "diff_lambda", "fairbatch_alpha",
                     "fcl_lambda_y", "fcl_lambda_g", "eo_cla_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        self.hidden_dims = tuple(self.hidden_dims)
        self.disc_hidden_dims = tuple(self.disc_hidden_dims)

    @property
    def uses_labels(self) -> bool:
        return self.method in ("AAdv", "ADAdv")

    @property
    def effective_n_discriminators(self) -> int:
        if self.method in ("Adv", "AAdv"):
            return 1
        return self.n_discriminators

    @property
    def effective_diff_lambda(self) -> float:
        return self.diff_lambda if self.method in ("DAdv", "ADAdv") else 0.0


# ---------------------------------------------------------------------------
# Gate: shared head plus group-specific additive heads on the hidden state

@dataclass
class GateModel:
    base: nn.Network                 # encoder plus shared head
    head_weights: list[np.ndarray]   # per group, [output_dim x hidden_dim]
    head_biases: list[np.ndarray]

    @property
    def num_groups(self) -> int:
        return len(self.head_weights)


def init_gate_model(spec: nn.MlpSpec, num_groups: int, head_seed: int) -> GateModel:
    base = nn.init_network(spec)
    h = base.hidden_dim
    out = spec.output_dim
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(head_seed, 3)))
    bound = np.sqrt(6.0 / (h + out))
    return GateModel(
        base=base,
        head_weights=[rng.uniform(-bound, bound, size=(out, h)) for _ in range(num_groups)],
        head_biases=[np.zeros(out) for _ in range(num_groups)],
    )


def gate_forward(shared_hidden: np.ndarray, g: np.ndarray, shared_logits: np.ndarray,
                 head_weights: list[np.ndarray], head_biases: list[np.ndarray]) -> np.ndarray:
    """logits = shared_logits + head_g(hidden), hard-gated by each instance's group."""
    g = np.asarray(g, dtype=int)
    if g.min() < 0 or g.max() >= len(head_weights):
        raise LabelDomainError(f"group label outside [0, {len(head_weights)})")
    logits = shared_logits.copy()
    for gr in range(len(head_weights)):
        mask = g == gr
        if mask.any():
            logits[mask] += shared_hidden[mask] @ head_weights[gr].T + head_biases[gr]
    return logits


def gate_soft_logits(model: GateModel, X: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """Inference logits with group heads mixed by a prior (no g needed)."""
    trace = nn.forward(model.base, X)
    h = trace.hidden
    logits = trace.logits.copy()
    for gr in range(model.num_groups):
        logits += prior[gr] * (h @ model.head_weights[gr].T + model.head_biases[gr])
    return logits


# ---------------------------------------------------------------------------
# FairBatch

@dataclass
class FairBatchState:
    probs: dict[tuple[int, int], float]
    alpha: float
    per_cell_losses: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        vals = np.array(list(self.probs.values()))
        if np.any(vals < 0) or abs(vals.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be nonnegative and sum to 1")


def init_fairbatch_state(train: Dataset, alpha: float) -> FairBatchState:
    counts = train.cell_counts()
    n = train.n
    return FairBatchState(probs={cell: c / n for cell, c in counts.items()}, alpha=alpha)


def fairbatch_epoch_update(state: FairBatchState,
                           epoch_cell_losses: dict[tuple[int, int], float]) -> FairBatchState:
    """Shift mass toward higher-loss cells: probs[y,g] += alpha * sign(L[y,g] - mean_g L[y,.]),
    clip at 0, renormalize within each class so class marginals are preserved."""
    losses = dict(state.per_cell_losses)
    losses.update(epoch_cell_losses)  # unobserved cells carry over
    classes = sorted({c for c, _ in state.probs})
    new_probs: dict[tuple[int, int], float] = {}
    for c in classes:
        cells = sorted(cell for cell in state.probs if cell[0] == c)
        marginal = sum(state.probs[cell] for cell in cells)
        known = [losses[cell] for cell in cells if cell in losses]
        mean_loss = sum(known) / len(known) if known else 0.0
        raw = {}
        for cell in cells:
            step = 0.0
            if cell in losses:
                diff = losses[cell] - mean_loss
                step = state.alpha * float(np.sign(diff))
            raw[cell] = max(0.0, state.probs[cell] + step)
        total = sum(raw.values())
        if total <= 0.0:
            raise FairbatchCollapseError(f"all sampling probs for class {c} clipped to zero")
        for cell in cells:
            new_probs[cell] = raw[cell] * marginal / total
    return FairBatchState(probs=new_probs, alpha=state.alpha, per_cell_losses=losses)


# ---------------------------------------------------------------------------
# Loss terms

def fairscl_loss(reprs: np.ndarray, y: np.ndarray, g: np.ndarray,
                 fcl_lambda_y: float, fcl_lambda_g: float, temperature: float = 0.07
                 ) -> tuple[float, np.ndarray]:
    """fcl_lambda_y * SCL(same-y positives) + fcl_lambda_g * SCL(same-y,
    other-g positives). Degenerate terms contribute zero."""
    y = np.asarray(y, dtype=int)
    g = np.asarray(g, dtype=int)
    total = 0.0
    grad = np.zeros_like(np.asarray(reprs, dtype=float))
    if fcl_lambda_y > 0:
        try:
            loss, d = nn.supervised_contrastive_loss(reprs, y, temperature)
            total += fcl_lambda_y * loss
            grad += fcl_lambda_y * d
        except ContrastiveDegenerateError:
            pass
    if fcl_lambda_g > 0:
        mask = (y[:, None] == y[None, :]) & (g[:, None] != g[None, :])
        try:
            loss, d = nn.supervised_contrastive_loss(reprs, y, temperature, positive_mask=mask)
            total += fcl_lambda_g * loss
            grad += fcl_lambda_g * d
        except ContrastiveDegenerateError:
            pass
    return total, grad


def eo_cla_adjusted_loss(per_example_losses: np.ndarray, y: np.ndarray, g: np.ndarray,
                         eo_cla_lambda: float) -> tuple[float, np.ndarray]:
    """Loss-gap penalty: lambda * sum_y sum_g |mean CE of cell (y,g) - mean CE
    of class y| over nonempty batch cells. Returns (addition, per-example
    scale s_i such that d addition / d CE_i = s_i); sign(0) = 0 at ties."""
    ce = np.asarray(per_example_losses, dtype=float)
    y = np.asarray(y, dtype=int)
    g = np.asarray(g, dtype=int)
    n = ce.shape[0]
    scale = np.zeros(n)
    addition = 0.0
    if eo_cla_lambda == 0.0:
        return 0.0, scale
    for c in np.unique(y):
        in_c = y == c
        n_c = int(in_c.sum())
        m_c = ce[in_c].mean()
        sign_sum = 0.0
        for gr in np.unique(g[in_c]):
            in_cell = in_c & (g == gr)
            m_cg = ce[in_cell].mean()
            diff = m_cg - m_c
            # treat float-noise ties as exact ties so equal losses give no step
            s = 0.0 if abs(diff) <= 1e-12 * max(1.0, abs(m_c)) else float(np.sign(diff))
            addition += eo_cla_lambda * abs(diff)
            scale[in_cell] += eo_cla_lambda * s / in_cell.sum()
            sign_sum += s
        scale[in_c] -= eo_cla_lambda * sign_sum / n_c
    return addition, scale


# ---------------------------------------------------------------------------
# Discriminators

@dataclass
class Discriminator:
    net: nn.Network
    uses_labels: bool


def init_discriminators(cfg: MethodConfig, hidden_dim: int, num_classes: int,
                        num_groups: int) -> list[Discriminator]:
    discs = []
    in_dim = hidden_dim + (num_classes if cfg.uses_labels else 0)
    for k in range(cfg.effective_n_discriminators):
        # hidden layer required: the orthogonality penalty reads it
        spec = nn.MlpSpec(input_dim=in_dim, hidden_dims=cfg.disc_hidden_dims or (hidden_dim,),
                          output_dim=num_groups, activation=cfg.activation,
                          seed=_derive_seed(cfg.seed, 11 + k))
        discs.append(Discriminator(net=nn.init_network(spec), uses_labels=cfg.uses_labels))
    return discs


def _derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence(entropy=(seed, stream)).generate_state(1)[0])


def _disc_inputs(disc: Discriminator, hidden: np.ndarray, y: np.ndarray,
                 num_classes: int) -> np.ndarray:
    if not disc.uses_labels:
        return hidden
    onehot = np.zeros((hidden.shape[0], num_classes))
    onehot[np.arange(hidden.shape[0]), y] = 1.0
    return np.concatenate([hidden, onehot], axis=1)


def adversarial_hidden_grad(discs: list[Discriminator], hidden: np.ndarray, batch: Batch,
                            num_classes: int, gate: nn.GradReverseGate
                            ) -> tuple[float, np.ndarray]:
    """Mean discriminator CE and its gradient w.r.t. hidden, passed through
    gradient reversal. The main model descends CE_main - lambda * mean CE_disc."""
    h = hidden.shape[1]
    mean_loss = 0.0
    mean_grad = np.zeros_like(hidden)
    for disc in discs:
        inputs = _disc_inputs(disc, hidden, batch.y, num_classes)
        trace = nn.forward(disc.net, inputs)
        loss, d_logits, _ = nn.cross_entropy(trace.logits, batch.g, batch.weights)
        grads = nn.backward(disc.net, trace, d_logits)
        mean_loss += loss / len(discs)
        mean_grad += grads.d_X[:, :h] / len(discs)
    return mean_loss, gate.backward(mean_grad)


def discriminator_step(discs: list[Discriminator], opt_states: list[nn.OptimizerState],
                       hidden: np.ndarray, batch: Batch, num_classes: int,
                       diff_lambda: float) -> float:
    """Update each discriminator on its own CE; with several discriminators
    and diff_lambda > 0, add the pairwise first-layer orthogonality penalty
    diff_lambda * sum_{i<j} ||H_i^T H_j||_F^2."""
    traces = []
    for disc in discs:
        inputs = _disc_inputs(disc, hidden, batch.y, num_classes)
        traces.append(nn.forward(disc.net, inputs))
    first_layer = [t.post[0] for t in traces]
    total = 0.0
    penalty_grads = [np.zeros_like(H) for H in first_layer]
    if diff_lambda > 0 and len(discs) > 1:
        for i in range(len(discs)):
            for j in range(i + 1, len(discs)):
                M = first_layer[i].T @ first_layer[j]
                total += diff_lambda * float(np.sum(M * M))
                penalty_grads[i] += 2.0 * diff_lambda * first_layer[j] @ M.T
                penalty_grads[j] += 2.0 * diff_lambda * first_layer[i] @ M
    for disc, opt, trace, pgrad in zip(discs, opt_states, traces, penalty_grads):
        loss, d_logits, _ = nn.cross_entropy(trace.logits, batch.g, batch.weights)
        total += loss
        extra = {0: pgrad} if np.any(pgrad) else None
        grads = nn.backward(disc.net, trace, d_logits, extra_post_grads=extra)
        nn.optimizer_step(disc.net, grads, opt)
    return total


def adv_joint_step(main: nn.Network, main_opt: nn.OptimizerState,
                   discs: list[Discriminator], disc_opts: list[nn.OptimizerState],
                   batch: Batch, cfg: MethodConfig, num_classes: int) -> float:
    """One joint update: main model gets CE plus the reversed adversarial
    gradient; each discriminator minimizes its own CE (plus orthogonality)."""
    loss, grads, _ = main_loss_and_grads(main, batch, cfg, discs=discs,
                                         num_classes=num_classes)
    trace = nn.forward(main, batch.X)
    hidden = trace.hidden
    nn.optimizer_step(main, grads, main_opt)
    discriminator_step(discs, disc_opts, hidden, batch, num_classes,
                       cfg.effective_diff_lambda)
    return loss


# ---------------------------------------------------------------------------
# The main-model objective for one batch (shared by training and the
# finite-difference gradient checks; discriminator parameters are frozen here)

def main_loss_and_grads(model, batch: Batch, cfg: MethodConfig,
                        discs: list[Discriminator] | None = None,
                        num_classes: int | None = None
                        ) -> tuple[float, nn.Gradients, np.ndarray]:
    """Returns (scalar objective, gradients for the model, per-example CE).

    model is a Network, or a GateModel for method="Gate"; its gradients
    then cover the base network followed by the per-group head params.
    """
    is_gate = isinstance(model, GateModel)
    net = model.base if is_gate else model
    trace = nn.forward(net, batch.X)
    hidden = trace.hidden
    if is_gate:
        logits = gate_forward(hidden, batch.g, trace.logits,
                              model.head_weights, model.head_biases)
    else:
        logits = trace.logits

    loss, d_logits, per_example = nn.cross_entropy(logits, batch.y, batch.weights)

    if cfg.method == "EO_CLA" and cfg.eo_cla_lambda > 0:
        addition, scale = eo_cla_adjusted_loss(per_example, batch.y, batch.g,
                                               cfg.eo_cla_lambda)
        loss += addition
        probs = nn.softmax(logits)
        unweighted = probs.copy()
        unweighted[np.arange(len(batch.y)), batch.y] -= 1.0
        d_logits = d_logits + scale[:, None] * unweighted

    hidden_extra = np.zeros_like(hidden)
    if cfg.method == "FairSCL" and (cfg.fcl_lambda_y > 0 or cfg.fcl_lambda_g > 0):
        scl_loss, scl_grad = fairscl_loss(hidden, batch.y, batch.g,
                                          cfg.fcl_lambda_y, cfg.fcl_lambda_g,
                                          cfg.temperature)
        loss += scl_loss
        hidden_extra += scl_grad
    if cfg.method in _ADV_FAMILY and cfg.adv_lambda > 0:
        if not discs:
            raise ShapeError("adversarial method requires discriminators")
        gate = nn.GradReverseGate(cfg.adv_lambda)
        disc_loss, rev_grad = adversarial_hidden_grad(
            discs, hidden, batch, num_classes or int(batch.y.max()) + 1, gate)
        loss -= cfg.adv_lambda * disc_loss
        hidden_extra += rev_grad

    head_w_grads: list[np.ndarray] = []
    head_b_grads: list[np.ndarray] = []
    if is_gate:
        for gr in range(model.num_groups):
            mask = batch.g == gr
            dW = d_logits[mask].T @ hidden[mask] if mask.any() else np.zeros_like(model.head_weights[gr])
            db = d_logits[mask].sum(axis=0) if mask.any() else np.zeros_like(model.head_biases[gr])
            head_w_grads.append(dW)
            head_b_grads.append(db)
            if mask.any():
                hidden_extra[mask] += d_logits[mask] @ model.head_weights[gr]

    extra = None
    if np.any(hidden_extra):
        if net.n_layers < 2:
            raise ShapeError("hidden-level loss terms need at least one hidden layer")
        extra = {net.n_layers - 2: hidden_extra}
    grads = nn.backward(net, trace, d_logits, extra_post_grads=extra)
    if is_gate:
        grads = GateGradients(grads, head_w_grads, head_b_grads)
    return loss, grads, per_example


@dataclass
class GateGradients:
    base: nn.Gradients
    head_weights: list[np.ndarray]
    head_biases: list[np.ndarray]


def gate_optimizer_step(model: GateModel, grads: GateGradients,
                        base_opt: nn.OptimizerState, head_opt: nn.OptimizerState):
    nn.optimizer_step(model.base, grads.base, base_opt)
    params = model.head_weights + model.head_biases
    glist = grads.head_weights + grads.head_biases
    if head_opt.kind == "sgd":
        for p, g in zip(params, glist):
            p -= head_opt.lr * g
    else:
        head_opt.t += 1
        bc1 = 1.0 - head_opt.beta1 ** head_opt.t
        bc2 = 1.0 - head_opt.beta2 ** head_opt.t
        for p, g, m, v in zip(params, glist, head_opt.m, head_opt.v):
            m *= head_opt.beta1
            m += (1.0 - head_opt.beta1) * g
            v *= head_opt.beta2
            v += (1.0 - head_opt.beta2) * g * g
            p -= head_opt.lr * (m / bc1) / (np.sqrt(v / bc2) + head_opt.eps)


def make_gate_head_optimizer(model: GateModel, kind: str, lr: float) -> nn.OptimizerState:
    params = model.head_weights + model.head_biases
    return nn.OptimizerState(kind=kind, lr=lr, t=0,
                             m=[np.zeros_like(p) for p in params],
                             v=[np.zeros_like(p) for p in params])


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_MAGIC = "fairkit-ckpt-v1"


def save_checkpoint(path, model, opt_state: nn.OptimizerState, epoch: int):
    is_gate = isinstance(model, GateModel)
    net = model.base if is_gate else model
    payload = {
        "magic": np.array(CHECKPOINT_MAGIC),
        "kind": np.array("gate" if is_gate else "mlp"),
        "epoch": np.array(epoch),
        "input_dim": np.array(net.spec.input_dim),
        "hidden_dims": np.array(net.spec.hidden_dims, dtype=int),
        "output_dim": np.array(net.spec.output_dim),
        "activation": np.array(net.spec.activation),
        "seed": np.array(net.spec.seed),
        "params": net.flat_params(),
        "opt_kind": np.array(opt_state.kind),
        "opt_lr": np.array(opt_state.lr),
        "opt_t": np.array(opt_state.t),
        "opt_m": np.concatenate([m.ravel() for m in opt_state.m]) if opt_state.m else np.zeros(0),
        "opt_v": np.concatenate([v.ravel() for v in opt_state.v]) if opt_state.v else np.zeros(0),
    }
    if is_gate:
        payload["num_groups"] = np.array(model.num_groups)
        payload["head_params"] = np.concatenate(
            [w.ravel() for w in model.head_weights] + [b.ravel() for b in model.head_biases])
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path):
    """Returns (model, opt_state, epoch); model is a Network or GateModel."""
    with np.load(path, allow_pickle=False) as z:
        if str(z["magic"]) != CHECKPOINT_MAGIC:
            raise ParseErrorForCheckpoint(path)
        spec = nn.MlpSpec(input_dim=int(z["input_dim"]),
                          hidden_dims=tuple(int(h) for h in z["hidden_dims"]),
                          output_dim=int(z["output_dim"]),
                          activation=str(z["activation"]),
                          seed=int(z["seed"]))
        net = nn.init_network(spec)
        net.set_flat_params(z["params"])
        opt = nn.make_optimizer(net, kind=str(z["opt_kind"]), lr=float(z["opt_lr"]))
        opt.t = int(z["opt_t"])
        flat_m, flat_v = z["opt_m"], z["opt_v"]
        i = 0
        for m, v in zip(opt.m, opt.v):
            m[...] = flat_m[i : i + m.size].reshape(m.shape)
            v[...] = flat_v[i : i + v.size].reshape(v.shape)
            i += m.size
        epoch = int(z["epoch"])
        if str(z["kind"]) == "gate":
            num_groups = int(z["num_groups"])
            h, out = net.hidden_dim, spec.output_dim
            model = GateModel(base=net,
                              head_weights=[np.zeros((out, h)) for _ in range(num_groups)],
                              head_biases=[np.zeros(out) for _ in range(num_groups)])
            flat = z["head_params"]
            j = 0
            for w in model.head_weights:
                w[...] = flat[j : j + w.size].reshape(w.shape)
                j += w.size
            for b in model.head_biases:
                b[...] = flat[j : j + b.size].reshape(b.shape)
                j += b.size
            return model, opt, epoch
        return net, opt, epoch


class ParseErrorForCheckpoint(TrainingDivergedError):
    def __init__(self, path):
        super().__init__(f"{path}: not a recognized checkpoint file")


# ---------------------------------------------------------------------------
# The training loop

@dataclass
class RunRecord:
    config: dict
    rows: list[dict] = field(default_factory=list)
    model: object = None
    discriminators: list[Discriminator] = field(default_factory=list)
    fairbatch_state: FairBatchState | None = None


def predict(model, X: np.ndarray, g: np.ndarray | None = None) -> np.ndarray:
    if isinstance(model, GateModel):
        trace = nn.forward(model.base, X)
        logits = gate_forward(trace.hidden, g, trace.logits,
                              model.head_weights, model.head_biases)
    else:
        logits = nn.forward(model, X).logits
    return logits.argmax(axis=1)


def _evaluate_split(model, ds: Dataset) -> tuple[float, float]:
    preds = predict(model, ds.X, ds.g)
    report = evaluate_predictions(preds, ds.y, ds.g, ds.num_classes, ds.num_groups)
    return report.performance, report.fairness


def _shuffle_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


def train(train_ds: Dataset, dev_ds: Dataset, test_ds: Dataset, cfg: MethodConfig,
          run_dir=None) -> RunRecord:
    """Train one model; records per-epoch dev/test (performance, fairness)
    with epoch 0 being the untouched initialization. When run_dir is given,
    epochs.jsonl and checkpoints/epoch_<k> are written as training goes."""
    num_classes = train_ds.num_classes
    num_groups = train_ds.num_groups
    spec = nn.MlpSpec(input_dim=train_ds.dim, hidden_dims=cfg.hidden_dims,
                      output_dim=num_classes, activation=cfg.activation, seed=cfg.seed)
    if cfg.method == "Gate":
        model = init_gate_model(spec, num_groups, head_seed=_derive_seed(cfg.seed, 21))
        main_opt = nn.make_optimizer(model.base, kind=cfg.optimizer, lr=cfg.lr)
        head_opt = make_gate_head_optimizer(model, cfg.optimizer, cfg.lr)
    else:
        model = nn.init_network(spec)
        main_opt = nn.make_optimizer(model, kind=cfg.optimizer, lr=cfg.lr)
        head_opt = None

    discs: list[Discriminator] = []
    disc_opts: list[nn.OptimizerState] = []
    if cfg.method in _ADV_FAMILY:
        discs = init_discriminators(cfg, model.base.hidden_dim if cfg.method == "Gate"
                                    else model.hidden_dim, num_classes, num_groups)
        disc_opts = [nn.make_optimizer(d.net, kind=cfg.optimizer, lr=cfg.lr) for d in discs]

    fb_state = init_fairbatch_state(train_ds, cfg.fairbatch_alpha) \
        if cfg.method == "FairBatch" else None

    run_dir = Path(run_dir) if run_dir is not None else None
    epochs_file = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        epochs_file = run_dir / "epochs.jsonl"
        epochs_file.write_text("")

    record = RunRecord(config={"method": cfg.method, "seed": cfg.seed},
                       model=model, discriminators=discs, fairbatch_state=fb_state)

    def emit(epoch: int):
        dev_p, dev_f = _evaluate_split(model, dev_ds)
        test_p, test_f = _evaluate_split(model, test_ds)
        ckpt = None
        if run_dir is not None:
            ckpt = str(run_dir / "checkpoints" / f"epoch_{epoch}.npz")
            save_checkpoint(ckpt, model, main_opt, epoch)
        row = {"epoch": epoch, "dev_performance": dev_p, "dev_fairness": dev_f,
               "test_performance": test_p, "test_fairness": test_f,
               "checkpoint": ckpt}
        record.rows.append(row)
        if epochs_file is not None:
            with open(epochs_file, "a") as f:
                f.write(json.dumps(row) + "\n")

    emit(0)

    for epoch in range(1, cfg.epochs + 1):
        probs = fb_state.probs if fb_state is not None else None
        plan = BatchPlan(batch_size=min(cfg.batch_size, train_ds.n),
                         shuffle_seed=_shuffle_seed(cfg.seed, epoch),
                         group_sampling_probs=probs)
        batches = make_batches(train_ds, plan)
        cell_sums: dict[tuple[int, int], float] = {}
        cell_counts: dict[tuple[int, int], int] = {}
        for b_idx, batch in enumerate(batches):
            if cfg.method in _ADV_FAMILY:
                loss = adv_joint_step(model, main_opt, discs, disc_opts, batch,
                                      cfg, num_classes)
            else:
                loss, grads, per_example = main_loss_and_grads(model, batch, cfg)
                if cfg.method == "Gate":
                    gate_optimizer_step(model, grads, main_opt, head_opt)
                else:
                    nn.optimizer_step(model, grads, main_opt)
                if fb_state is not None:
                    for i in range(len(batch.y)):
                        cell = (int(batch.y[i]), int(batch.g[i]))
                        cell_sums[cell] = cell_sums.get(cell, 0.0) + float(per_example[i])
                        cell_counts[cell] = cell_counts.get(cell, 0) + 1
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {b_idx}")
        if fb_state is not None and cfg.fairbatch_alpha > 0:
            epoch_losses = {cell: cell_sums[cell] / cell_counts[cell] for cell in cell_sums}
            fb_state = fairbatch_epoch_update(fb_state, epoch_losses)
            record.fairbatch_state = fb_state
        emit(epoch)

    return record
