"""End-to-end forecaster: covariate embedding, adaptive graph, observation
attention, spiking aggregation, dual-path fusion and the prediction head,
plus the training loop and the W1-W4 ablation variants.

Ablations select what happens after the spiking aggregation:
  W1  LSTM -> head
  W2  spikes -> self-attention -> head (no LSTM)
  W3  LSTM -> re-encode -> self-attention -> head (no gate)
  W4  gated fusion of the LSTM and self-attention branches (full model)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import SeriesDataset, SplitWindows, WindowBatch, covariate_indices, make_windows, metric_r2, metric_rse
from .dsf import GateParams, LstmParams, SsaParams, attention_core, gate_fuse, lstm_forward, ssa_forward
from .errors import ContractError, DivergenceError
from .graph import AdaptiveGraph, NodeEmbeddings, build_graph, init_live_embeddings
from .mssa import HopWeights, mssa_forward
from .obs import ObsParams, obs_forward
from .spiking import LifParams, encode_sequence

ABLATIONS = ("W1", "W2", "W3", "W4")
COV_WIDTH = 4


@dataclass
class ModelConfig:
    n_nodes: int = 8
    t_in: int = 64
    horizon: int = 3
    emb_dim: int = 16
    k1: int = 4
    k2: int = 4
    d1: int = 32
    d2: int = 32
    h_dim: int = 64
    d_k: int = 32
    ts: int = 4
    beta: float = 0.5
    # model-level threshold sits below the (-1, 1) LSTM hidden range so the
    # re-encoded attention branch keeps firing; the neuron-module default of
    # 1.0 would silence it
    u_th: float = 0.25
    u_reset: float = 0.0
    alpha: float = 2.0
    # the pruning threshold divides by the self-loop weight, which caps the
    # candidate count below 1 + lam; 4.0 keeps two-hop sampling non-degenerate
    lam: float = 4.0
    lr: float = 1e-3
    epochs: int = 6
    seed: int = 1
    ablation: str = "W4"
    batch_size: int = 16
    stride: int = 1
    max_batches: int = 24
    minute_covariate: bool = False

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ContractError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        for name in ("n_nodes", "t_in", "horizon", "emb_dim", "d1", "d2",
                     "h_dim", "d_k", "ts", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ContractError(f"config field {name} must be positive")
        if self.k1 < 0 or self.k2 < 0 or self.lam < 0:
            raise ContractError("k1, k2 and lam must be non-negative")

    def lif(self) -> LifParams:
        return LifParams(beta=self.beta, u_th=self.u_th, u_reset=self.u_reset, alpha=self.alpha)

    @property
    def feature_width(self) -> int:
        return 1 + COV_WIDTH * (3 if self.minute_covariate else 2)


class ForecastModel:
    """Holds all parameter tensors and the normalization stats of a trained run."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        # each component draws from its own seeded stream, so ablation variants
        # share bit-identical weights for the components they have in common
        comp = lambda tag: np.random.default_rng([config.seed, tag])
        f = config.feature_width
        self.embeddings = init_live_embeddings(
            config.n_nodes, config.emb_dim, config.lam, config.k1, config.k2, config.seed)
        self.cov_tables = {}
        if config.minute_covariate:
            self.cov_tables["minute"] = self._table(60, comp(2))
        self.cov_tables["hour"] = self._table(24, comp(3))
        self.cov_tables["dow"] = self._table(7, comp(4))
        self.obs_params = ObsParams.init(f, comp(5))
        self.hop_weights = HopWeights.init(f, config.d1, config.d2, comp(6))
        ab = config.ablation
        self.lstm_params = LstmParams.init(config.d2, config.h_dim, comp(7)) if ab != "W2" else None
        if ab == "W1":
            self.ssa_params = None
            self.ssa_proj = None
        else:
            ssa_in = config.d2 if ab == "W2" else config.h_dim
            self.ssa_params = SsaParams.init(ssa_in, config.d_k, comp(8))
            # W4 starts the fusion branch silent (zero readout) so it only
            # enters once its projection learns a target-correlated signal;
            # W2/W3 feed the head directly and need a live path from step one
            if ab == "W4":
                proj = np.zeros((config.d_k, config.h_dim), dtype=np.float32)
            else:
                proj = (comp(9).standard_normal((config.d_k, config.h_dim))
                        / np.sqrt(config.d_k)).astype(np.float32)
            self.ssa_proj = Tensor(proj, requires_grad=True)
        self.gate_params = GateParams.init(config.h_dim, comp(10)) if ab == "W4" else None
        rng_head = comp(11)
        self.head_w = Tensor(
            (rng_head.standard_normal((config.h_dim, config.horizon)) / np.sqrt(config.h_dim)).astype(np.float32),
            requires_grad=True)
        self.head_b = Tensor(np.zeros(config.horizon, dtype=np.float32), requires_grad=True)
        # fixed gain bringing the attention readout to unit scale; spike-rate
        # averaging leaves it around 0.1, too small for the head to exploit
        # within a short run.  Set once from the first forward batch.
        self.ssa_scale: float | None = None if ab != "W1" else 1.0
        self.norm_mean: np.ndarray | None = None
        self.norm_std: np.ndarray | None = None

    @staticmethod
    def _table(rows: int, rng: np.random.Generator) -> Tensor:
        return Tensor((rng.standard_normal((rows, COV_WIDTH)) * 0.5).astype(np.float32),
                      requires_grad=True)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict:
        params = {"emb/e": self.embeddings.e}
        for name, t in self.cov_tables.items():
            params[f"cov/{name}"] = t
        for name, t in self.obs_params.tensors().items():
            params[f"obs/{name}"] = t
        for name, t in self.hop_weights.tensors().items():
            params[f"mssa/{name}"] = t
        if self.lstm_params is not None:
            for name, t in self.lstm_params.tensors().items():
                params[f"lstm/{name}"] = t
        if self.ssa_params is not None:
            for name, t in self.ssa_params.tensors().items():
                params[f"ssa/{name}"] = t
            params["ssa/proj"] = self.ssa_proj
        if self.gate_params is not None:
            for name, t in self.gate_params.tensors().items():
                params[f"gate/{name}"] = t
        params["head/w"] = self.head_w
        params["head/b"] = self.head_b
        return params

    def param_count(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def set_norm_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.norm_mean = np.asarray(mean, dtype=np.float32)
        self.norm_std = np.asarray(std, dtype=np.float32)

    # -- forward ------------------------------------------------------------

    def embed_inputs(self, z: Tensor, times: np.ndarray) -> Tensor:
        """(B, T, N) normalized values + timestamps -> (B, T, N, f) features.

        Covariates are table lookups broadcast identically to every node;
        hourly data carries hour-of-day and day-of-week only.
        """
        b, t, n = z.shape
        minute, hour, dow = covariate_indices(times)
        feats = [ag.reshape(z, (b, t, n, 1))]
        lookups = []
        if "minute" in self.cov_tables:
            lookups.append((self.cov_tables["minute"], minute))
        lookups.append((self.cov_tables["hour"], hour))
        lookups.append((self.cov_tables["dow"], dow))
        for table, idx in lookups:
            e = ag.take(table, idx, axis=0)                # (B, T, w)
            e = ag.reshape(e, (b, t, 1, COV_WIDTH))
            feats.append(ag.broadcast_to(e, (b, t, n, COV_WIDTH)))
        return ag.concat(feats, axis=-1)

    def build_graph(self) -> AdaptiveGraph:
        return build_graph(self.embeddings, self.config.lam,
                           self.config.k1, self.config.k2, self.config.seed)

    def _scaled_ssa(self, ssa_out):
        if self.ssa_scale is None:
            self.ssa_scale = float(1.0 / (ssa_out.data.std() + 1e-6))
        return ag.scale(ssa_out, self.ssa_scale)

    def forward(self, batch: WindowBatch, counter=None) -> Tensor:
        """Normalized-scale predictions of shape (B, L, N)."""
        cfg = self.config
        lif = cfg.lif()
        z = Tensor(batch.normalized_inputs())
        x = self.embed_inputs(z, batch.input_times)
        b, t, n, f = x.shape

        graph = self.build_graph()
        if counter is not None:
            counter.add_dense("adjacency", macs=n * n * cfg.emb_dim)
            s1_sizes = sum(len(s) for s in graph.samples_local)
            counter.add_dense("obs", macs=b * t * (3 * n * f * f + 2 * s1_sizes * f))

        x_obs = obs_forward(x, graph.samples_local, self.obs_params)
        s_mssa = mssa_forward(x_obs, graph, self.hop_weights, lif, cfg.ts, counter=counter)

        t_frames = t * cfg.ts
        ab = cfg.ablation
        if ab == "W2":
            ssa_out = self._scaled_ssa(ssa_forward(s_mssa, self.ssa_params, lif, counter=counter))
            feat_seq = ag.matmul(ssa_out, self.ssa_proj)
            if counter is not None:
                counter.add_dense("ssa.proj", macs=b * t_frames * n * cfg.d_k * cfg.h_dim)
        else:
            h_lstm = lstm_forward(s_mssa, self.lstm_params, counter=counter)
            if ab == "W1":
                feat_seq = h_lstm
            else:
                boundary = np.arange(cfg.ts - 1, t_frames, cfg.ts, dtype=np.intp)
                h_series = ag.take(h_lstm, boundary, axis=h_lstm.data.ndim - 3)
                re_encoded = encode_sequence(h_series, cfg.ts, lif)
                if counter is not None:
                    counter.add_lif("dsf.encoder", neurons_steps=re_encoded.values.data.size)
                    counter.observe_spikes("dsf.encoder", re_encoded.values.data)
                ssa_out = self._scaled_ssa(ssa_forward(re_encoded, self.ssa_params, lif, counter=counter))
                h_ssa = ag.matmul(ssa_out, self.ssa_proj)
                if counter is not None:
                    counter.add_dense("ssa.proj", macs=b * t_frames * n * cfg.d_k * cfg.h_dim)
                if ab == "W3":
                    feat_seq = h_ssa
                else:
                    feat_seq = gate_fuse(h_lstm, h_ssa, self.gate_params, counter=counter)

        final = ag.select_index(feat_seq, t_frames - 1, axis=feat_seq.data.ndim - 3)
        pred = ag.add(ag.matmul(final, self.head_w), self.head_b)   # (B, N, L)
        if counter is not None:
            counter.add_dense("head", macs=b * n * cfg.h_dim * cfg.horizon)
        return ag.transpose(pred, (0, 2, 1))                        # (B, L, N)

    def predict(self, batch: WindowBatch):
        """De-normalized forecast; (L, N) for a single window, else (B, L, N)."""
        if self.norm_mean is None or self.norm_std is None:
            raise ContractError("predict: model has no normalization stats")
        with ag.no_grad():
            pred = self.forward(batch).data
        out = pred * self.norm_std + self.norm_mean
        return out[0] if batch.batch_size == 1 else out


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adaptive-moment gradient descent over the model's named parameters."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / b1t
            v_hat = self.v[k] / b2t
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def clip_grad_norm(params: dict, max_norm: float = 1.0) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = np.float32(max_norm / norm)
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


# -- training -----------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    loss: float
    r2: float
    rse: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    test_r2: float = float("nan")
    test_rse: float = float("nan")

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].loss if self.epochs else float("nan")


def _batched_starts(starts: list, batch_size: int):
    for i in range(0, len(starts), batch_size):
        yield starts[i:i + batch_size]


def evaluate(model: ForecastModel, windows: SplitWindows, starts: list,
             batch_size: int = 32):
    """Global de-normalized (r2, rse) over the given window starts."""
    preds, targets = [], []
    with ag.no_grad():
        for chunk in _batched_starts(starts, batch_size):
            batch = windows.batch(chunk)
            p = model.forward(batch).data
            preds.append(batch.denormalize(p))
            targets.append(batch.targets)
    pred = np.concatenate(preds)
    target = np.concatenate(targets)
    return metric_r2(pred, target), metric_rse(pred, target)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = ag.sub(pred, Tensor(np.asarray(target, dtype=np.float32)))
    return ag.tmean(ag.mul(diff, diff))


def train(model: ForecastModel, dataset: SeriesDataset, config: ModelConfig | None = None,
          log_fn=None) -> tuple:
    """Fit the model on the dataset; returns (TrainReport, SplitWindows).

    Minimizes MSE on z-score normalized targets with Adam, clips the global
    gradient norm at 1.0, evaluates de-normalized R2/RSE on the validation
    split each epoch and aborts with a diagnostic if any parameter goes
    non-finite.  Deterministic for a fixed config seed.
    """
    cfg = config or model.config
    windows = make_windows(dataset, cfg.t_in, cfg.horizon, stride=cfg.stride)
    model.set_norm_stats(windows.mean, windows.std)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()

    for epoch in range(1, cfg.epochs + 1):
        order = [windows.train_starts[i] for i in rng.permutation(len(windows.train_starts))]
        losses = []
        n_batches = 0
        for chunk in _batched_starts(order, cfg.batch_size):
            if cfg.max_batches and n_batches >= cfg.max_batches:
                break
            batch = windows.batch(chunk)
            pred = model.forward(batch)
            loss = mse_loss(pred, batch.normalized_targets())
            model.zero_grad()
            ag.backward(loss)
            clip_grad_norm(params, 1.0)
            opt.step()
            for name, p in params.items():
                if not np.all(np.isfinite(p.data)):
                    raise DivergenceError(name)
            losses.append(loss.item())
            n_batches += 1
        if windows.val_starts:
            r2, rse = evaluate(model, windows, windows.val_starts, cfg.batch_size)
        else:
            r2, rse = float("nan"), float("nan")
        entry = EpochLog(epoch, float(np.mean(losses)) if losses else float("nan"), r2, rse)
        report.epochs.append(entry)
        if log_fn:
            log_fn(entry)

    if windows.test_starts:
        report.test_r2, report.test_rse = evaluate(
            model, windows, windows.test_starts, cfg.batch_size)
    return report, windows
