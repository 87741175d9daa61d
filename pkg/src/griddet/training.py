"""Detection loss and the SGD-with-momentum training loop.

Loss terms over a raw grid prediction (responsible predictor = the
highest-IoU box of the cell holding each target's center):

  box_mse          mean over responsible predictors of the summed squared
                   errors on (x, y, sqrt w, sqrt h)
  giou_term        mean (1 - GIoU) over responsible predictors
  confidence_term  w_obj * MSE(C_s -> IoU with target) over responsible
                   boxes + w_noobj * MSE(C_s -> 0) over all other boxes
  class_term       mean negative log-likelihood of the true class over
                   cells containing objects
  total            w_box*box_mse + w_giou*giou_term + confidence_term
                   + w_class*class_term

The target->predictor assignment and the confidence targets are frozen per
step (see LossContext): they are recomputed from the current predictions
every iteration but enter the loss as constants, so gradient checks
evaluate the same function the backward pass differentiates.

The optimizer keeps one velocity per parameter and updates

  V <- momentum*V - gamma^floor(t*batch/dataset_size) * lr * grad
  W <- W + V

Batch selection is a pure function of (seed, iteration): shuffled epochs
when the dataset is at least one batch long, sampling with replacement
otherwise. That makes resumed runs replay identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .boxes import BBox, iou_giou_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, UsageError
from .model import Network

# ---------------------------------------------------------------------------
# run configuration

@dataclass(frozen=True)
class RunConfig:
    lr: float = 0.0001
    momentum: float = 0.9
    gamma: float = 0.95
    batch: int = 32
    iterations: int = 10000
    seed: int = 0
    w_box: float = 5.0
    w_giou: float = 1.0
    w_obj: float = 1.0
    w_noobj: float = 0.5
    w_class: float = 1.0


_RUN_FIELDS = {
    "lr": float, "momentum": float, "gamma": float, "batch": int,
    "iterations": int, "seed": int, "w_box": float, "w_giou": float,
    "w_obj": float, "w_noobj": float, "w_class": float,
}


def parse_run_config(text: str) -> RunConfig:
    """key=value lines, '#' comments; unknown keys are errors."""
    values = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _RUN_FIELDS:
            raise ConfigError(f"line {ln}: unknown run-config key {key!r}")
        try:
            values[key] = _RUN_FIELDS[key](val)
        except ValueError:
            raise ConfigError(f"line {ln}: bad value for {key}: {val!r}") from None
    cfg = RunConfig(**values)
    if cfg.batch < 1 or cfg.iterations < 0 or cfg.lr < 0 or not 0 < cfg.gamma <= 1:
        raise ConfigError("run config out of range: need batch>=1, iterations>=0, lr>=0, 0<gamma<=1")
    return cfg


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# loss

@dataclass(frozen=True)
class LossBreakdown:
    total: float
    box_mse: float
    giou_term: float
    confidence_term: float
    class_term: float


def cross_entropy(probabilities, labels) -> float:
    """Mean negative log probability of the true class, clamped at 1e-12."""
    p = probabilities.data if isinstance(probabilities, T.Tensor) else np.asarray(probabilities)
    labels = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or labels.shape != (p.shape[0],):
        raise UsageError(f"cross_entropy expects probabilities (N, C) and N labels, got {p.shape} / {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= p.shape[1]:
        raise UsageError("cross_entropy label out of range")
    picked = np.clip(p[np.arange(p.shape[0]), labels], 1e-12, None)
    return float(-np.mean(np.log(picked)))


def _giou_loss_op(pcx, pcy, pw, ph, targets: np.ndarray) -> T.Tensor:
    """(K,) tensor of 1 - GIoU(pred, target); analytic backward."""
    e = np.stack([pcx.data, pcy.data, pw.data, ph.data], axis=1)
    _, gv, _, dgiou = iou_giou_grad(e, targets)

    def bwd(g):
        return tuple((-dgiou[:, j] * g).astype(pcx.dtype) for j in range(4))

    return T.record_op((1.0 - gv).astype(pcx.dtype), (pcx, pcy, pw, ph), bwd)


@dataclass(frozen=True)
class LossContext:
    """Per-step constants of the loss: the target->predictor assignment and
    the confidence targets (IoU of each responsible box with its target).

    Both are recomputed from the current predictions at every training step
    but enter the differentiated function as data, not as functions of the
    grid; a confidence target that carried gradient would push responsible
    boxes to match a lagging confidence instead of the ground truth.
    """

    resp: tuple  # (image, row, col, box, target) per target
    conf_targets: np.ndarray  # (K,) IoU values


def loss_context(grid_data: np.ndarray, targets_batch: list[list[BBox]],
                 boxes_per_cell: int) -> LossContext:
    """Assign each target to the highest-IoU box of its center cell."""
    from .activations import sigmoid as _sig

    n, s, _, d = grid_data.shape
    b = boxes_per_cell
    raw = grid_data[..., : 5 * b].reshape(n, s, s, b, 5)
    px = _sig(raw[..., 0])
    py = _sig(raw[..., 1])
    pw = raw[..., 2] ** 2
    ph = raw[..., 3] ** 2
    cols = np.arange(s).reshape(1, 1, s, 1)
    rows = np.arange(s).reshape(1, s, 1, 1)
    pcx = (cols + px) / s
    pcy = (rows + py) / s

    resp = []
    conf_targets = []
    for i, targets in enumerate(targets_batch):
        for t in targets:
            if not (0.0 <= t.cx <= 1.0 and 0.0 <= t.cy <= 1.0):
                raise UsageError(f"target center ({t.cx}, {t.cy}) outside [0,1]^2")
            r = min(s - 1, int(t.cy * s))
            c = min(s - 1, int(t.cx * s))
            cand = np.stack([pcx[i, r, c], pcy[i, r, c], pw[i, r, c], ph[i, r, c]], axis=1)
            ious, _, _, _ = iou_giou_grad(cand, np.tile(t.as_array(), (b, 1)))
            best = int(np.argmax(ious))
            resp.append((i, r, c, best, t))
            conf_targets.append(float(ious[best]))
    return LossContext(resp=tuple(resp), conf_targets=np.asarray(conf_targets))


def _loss_terms(grid: T.Tensor, targets_batch: list[list[BBox]], weights: RunConfig,
                boxes_per_cell: int, num_classes: int,
                context: LossContext | None = None) -> dict[str, T.Tensor]:
    """Build every loss term through the tape for a [N,S,S,D] grid."""
    g = grid.data
    n, s, _, d = g.shape
    b = boxes_per_cell
    if d != 5 * b + num_classes:
        raise UsageError(f"grid width {d} inconsistent with B={b}, classes={num_classes}")
    dtype = g.dtype

    if context is None:
        context = loss_context(g, targets_batch, b)
    resp = context.resp
    k = len(resp)
    zero = T.Tensor(np.zeros((), dtype=dtype))
    strides = (s * s * d, s * d, d, 1)

    def flat(i, r, c, ch):
        return i * strides[0] + r * strides[1] + c * strides[2] + ch

    if k:
        ii = np.array([e[0] for e in resp])
        rr = np.array([e[1] for e in resp])
        cc = np.array([e[2] for e in resp])
        bb = np.array([e[3] for e in resp])
        tgt = np.stack([e[4].as_array() for e in resp]).astype(np.float64)

        tx = T.gather(grid, flat(ii, rr, cc, 5 * bb))
        ty = T.gather(grid, flat(ii, rr, cc, 5 * bb + 1))
        tw = T.gather(grid, flat(ii, rr, cc, 5 * bb + 2))
        th = T.gather(grid, flat(ii, rr, cc, 5 * bb + 3))
        tc = T.gather(grid, flat(ii, rr, cc, 5 * bb + 4))

        sx = T.sigmoid(tx)
        sy = T.sigmoid(ty)
        cell_x = (tgt[:, 0] * s - cc).astype(dtype)
        cell_y = (tgt[:, 1] * s - rr).astype(dtype)
        sqw = np.sqrt(tgt[:, 2]).astype(dtype)
        sqh = np.sqrt(tgt[:, 3]).astype(dtype)
        box_sq = (T.square(sx - T.Tensor(cell_x)) + T.square(sy - T.Tensor(cell_y))
                  + T.square(tw - T.Tensor(sqw)) + T.square(th - T.Tensor(sqh)))
        box_mse = T.tsum(box_sq) * (1.0 / k)

        bcx = (sx + T.Tensor(cc.astype(dtype))) * (1.0 / s)
        bcy = (sy + T.Tensor(rr.astype(dtype))) * (1.0 / s)
        bw = T.square(tw)
        bh = T.square(th)
        giou_term = T.tsum(_giou_loss_op(bcx, bcy, bw, bh, tgt)) * (1.0 / k)

        conf_t = T.Tensor(context.conf_targets.astype(dtype))
        conf_obj = T.tsum(T.square(T.sigmoid(tc) - conf_t)) * (1.0 / k)
    else:
        box_mse = giou_term = conf_obj = zero

    # non-responsible confidence channels pull toward zero
    obj_flags = np.zeros((n, s, s, b), dtype=bool)
    for i, r, c, bx, _ in resp:
        obj_flags[i, r, c, bx] = True
    no_i, no_r, no_c, no_b = np.nonzero(~obj_flags)
    if len(no_i):
        noobj_idx = flat(no_i, no_r, no_c, 5 * no_b + 4)
        conf_noobj = T.tsum(T.square(T.sigmoid(T.gather(grid, noobj_idx)))) * (1.0 / len(noobj_idx))
    else:
        conf_noobj = zero

    # class scores over cells that contain objects (first target's class wins
    # if a cell holds several)
    cell_class: dict[tuple[int, int, int], int] = {}
    for i, r, c, _, t in resp:
        cell_class.setdefault((i, r, c), t.class_id)
    if cell_class:
        cells = sorted(cell_class)
        ci = np.array([e[0] for e in cells])
        cr = np.array([e[1] for e in cells])
        cx_ = np.array([e[2] for e in cells])
        if num_classes == 1:
            logits = T.gather(grid, flat(ci, cr, cx_, 5 * b))
            class_term = T.tsum(T.softplus(-logits)) * (1.0 / len(cells))
        else:
            idx = (flat(ci, cr, cx_, 5 * b)[:, None] + np.arange(num_classes)[None, :]).reshape(-1)
            logits = T.reshape(T.gather(grid, idx), (len(cells), num_classes))
            probs = T.softmax(logits)
            true_cls = np.array([cell_class[e] for e in cells], dtype=np.int64)
            picked = T.gather(T.log(probs), np.arange(len(cells)) * num_classes + true_cls)
            class_term = T.tsum(picked) * (-1.0 / len(cells))
    else:
        class_term = zero

    confidence_term = conf_obj * weights.w_obj + conf_noobj * weights.w_noobj
    total = (box_mse * weights.w_box + giou_term * weights.w_giou
             + confidence_term + class_term * weights.w_class)
    return {
        "total": total,
        "box_mse": box_mse,
        "giou_term": giou_term,
        "confidence_term": confidence_term,
        "class_term": class_term,
    }


def detection_loss(pred, targets: list[BBox], weights: RunConfig | None = None, *,
                   boxes_per_cell: int = 2, num_classes: int = 1,
                   context: LossContext | None = None) -> LossBreakdown:
    """Loss breakdown for a single [S,S,D] grid prediction against targets.

    Pass a precomputed `context` to hold the assignment and confidence
    targets fixed (gradient checks do this); otherwise it is derived from
    the prediction itself.
    """
    weights = weights or RunConfig()
    grid = pred if isinstance(pred, T.Tensor) else T.Tensor(np.asarray(pred))
    if grid.data.ndim != 3:
        raise UsageError(f"detection_loss expects [S,S,D] grid, got {tuple(grid.shape)}")
    batched = T.Tensor(grid.data[None])
    terms = _loss_terms(batched, [list(targets)], weights, boxes_per_cell, num_classes,
                        context=context)
    return LossBreakdown(
        total=terms["total"].item(),
        box_mse=terms["box_mse"].item(),
        giou_term=terms["giou_term"].item(),
        confidence_term=terms["confidence_term"].item(),
        class_term=terms["class_term"].item(),
    )


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class SgdState:
    velocities: dict[str, np.ndarray]
    momentum: float
    lr: float
    gamma: float
    t: int
    batch_size: int
    dataset_size: int


def init_sgd(network: Network, run: RunConfig, dataset_size: int) -> SgdState:
    vel = {name: np.zeros_like(p.data) for name, p in network.params.items()}
    return SgdState(velocities=vel, momentum=run.momentum, lr=run.lr, gamma=run.gamma,
                    t=0, batch_size=run.batch, dataset_size=dataset_size)


def lr_multiplier(state: SgdState) -> float:
    """gamma raised to the completed-epoch count floor(t*M/|X|)."""
    if state.dataset_size <= 0:
        raise UsageError("dataset size must be positive")
    return float(state.gamma ** (state.t * state.batch_size // state.dataset_size))


def sgd_step(state: SgdState, params: dict[str, T.Tensor], grads: dict[str, np.ndarray]) -> None:
    """V <- mu*V - gamma^epoch * lr * g;  W <- W + V;  t <- t + 1."""
    mult = lr_multiplier(state)
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != tuple(p.shape):
            raise UsageError(f"gradient shape {np.shape(g)} != parameter {name} shape {tuple(p.shape)}")
        v = state.velocities[name]
        v *= state.momentum
        v -= (mult * state.lr) * np.asarray(g, dtype=v.dtype)
        p.data = p.data + v
    state.t += 1


# ---------------------------------------------------------------------------
# batch sampling: pure function of (seed, iteration)

def batch_indices(seed: int, iteration: int, n: int, batch: int) -> np.ndarray:
    if n <= 0:
        raise UsageError("empty dataset")
    if n < batch:
        rng = np.random.default_rng([seed, 1, iteration])
        return rng.integers(0, n, size=batch)
    out = np.empty(batch, dtype=np.int64)
    pos = iteration * batch
    filled = 0
    while filled < batch:
        epoch, off = divmod(pos, n)
        perm = np.random.default_rng([seed, 0, epoch]).permutation(n)
        take = min(batch - filled, n - off)
        out[filled : filled + take] = perm[off : off + take]
        filled += take
        pos += take
    return out


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    iterations_run: int
    final_loss: float
    best_loss: float
    metrics_path: Path
    final_checkpoint: Path
    best_checkpoint: Path


def _save_train_state(out_dir: Path, state: SgdState) -> None:
    save_checkpoint(out_dir / "optimizer.gdk", state.velocities)
    (out_dir / "trainstate.txt").write_text(f"iteration={state.t}\n")


def resume_train_state(out_dir: Path, network: Network, state: SgdState) -> int:
    """Restore weights, velocities and iteration counter from a run dir."""
    ckpt = out_dir / "final.gdk"
    if not ckpt.exists():
        raise UsageError(f"no final.gdk to resume from in {out_dir}")
    network.load_state(load_checkpoint(ckpt))
    vel = load_checkpoint(out_dir / "optimizer.gdk")
    for name in state.velocities:
        state.velocities[name] = np.asarray(vel[name], dtype=state.velocities[name].dtype)
    for line in (out_dir / "trainstate.txt").read_text().splitlines():
        key, _, val = line.partition("=")
        if key.strip() == "iteration":
            state.t = int(val)
    return state.t


def train(network: Network, dataset, run: RunConfig, out_dir, resume: bool = False,
          progress=None) -> TrainResult:
    """Mini-batch SGD for run.iterations steps.

    `dataset` is indexable; dataset[i] -> (image array [3,input,input] in
    [0,1], list of target BBoxes). Writes metrics.csv (one line per
    iteration: iteration, lr multiplier, total, box_mse, giou_term,
    confidence_term, class_term), best.gdk, final.gdk and optimizer
    sidecars into out_dir.
    """
    n = len(dataset)
    if n == 0:
        raise UsageError("training dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = init_sgd(network, run, dataset_size=n)
    start = resume_train_state(out_dir, network, state) if resume else 0

    metrics_path = out_dir / "metrics.csv"
    mode = "a" if resume and metrics_path.exists() else "w"
    best_loss = math.inf
    best_path = out_dir / "best.gdk"
    final_path = out_dir / "final.gdk"
    last_total = math.nan

    with open(metrics_path, mode) as log:
        for step in range(start, run.iterations):
            idx = batch_indices(run.seed, step, n, run.batch)
            images = []
            targets = []
            for i in idx:
                img, tgts = dataset[int(i)]
                images.append(img)
                targets.append(tgts)
            batch = T.Tensor(np.stack(images).astype(network.dtype, copy=False))
            with T.Tape() as tape:
                grid = network.forward_batch(batch)
                terms = _loss_terms(grid, targets, run, network.config.boxes_per_cell,
                                    network.config.num_classes)
            grads = T.backward(tape, terms["total"], network.parameters())
            named = {name: grads[p].data for name, p in network.params.items()}
            mult = lr_multiplier(state)
            sgd_step(state, network.params, named)

            vals = [terms[k].item() for k in ("total", "box_mse", "giou_term",
                                              "confidence_term", "class_term")]
            last_total = vals[0]
            log.write(f"{state.t},{mult:.9g}," + ",".join(f"{v:.9g}" for v in vals) + "\n")
            if vals[0] < best_loss:
                best_loss = vals[0]
                save_checkpoint(best_path, network.state())
            if progress is not None:
                progress(state.t, vals[0])

    save_checkpoint(final_path, network.state())
    _save_train_state(out_dir, state)
    return TrainResult(iterations_run=run.iterations - start, final_loss=last_total,
                       best_loss=best_loss, metrics_path=metrics_path,
                       final_checkpoint=final_path, best_checkpoint=best_path)
