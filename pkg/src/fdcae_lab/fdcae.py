"""The f-DcAE acoustic model and its training objective.

The encoder maps MFCC frames (plus optional speaker/pitch vectors) to HMM-state logits
and a penultimate "p-code"; the decoder reconstructs the MFCCs from the p-code and the
same auxiliary vectors. Training minimizes

    alpha * F_CE - F_LFMMI + beta * F_MSE

where the logits serve both as softmax inputs for CE and as pseudo log-likelihoods for
LF-MMI. Baseline models are the same encoder trained without a decoder (beta = 0).
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embed import expand_aux
from .graph import (GraphError, PhoneLM, StateGraph, build_denominator_graph, build_numerator_graph,
                    forward_backward, forward_backward_batch)
from .hmm import Alignment, HmmTopology
from .nnet import (Adam, Affine, Module, ShapeError, TdnnLayer, Tensor, add_constant, concat, crop,
                   custom_loss, load_checkpoint, log_softmax, nll_loss, relu, save_checkpoint, scale,
                   sum_squared_error)

log = logging.getLogger(__name__)

AUX_MODES = ("none", "i", "p", "i+p")
CONDITIONS = ("baseline", "fdcae")
DEFAULT_OFFSETS = ((-1, 0, 1),) * 3 + ((-3, 0, 3),) * 5


class AuxModeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class ModelConfig:
    num_states: int = 38
    feat_dim: int = 40
    hidden_dim: int = 128
    pcode_dim: int = 128
    decoder_dim: int = 128
    decoder_layers: int = 4
    aux_mode: str = "none"
    ivector_dim: int = 16
    pvector_dim: int = 3
    tdnn_offsets: tuple = DEFAULT_OFFSETS

    def __post_init__(self):
        if self.aux_mode not in AUX_MODES:
            raise AuxModeError(f"aux mode must be one of {AUX_MODES}")
        self.tdnn_offsets = tuple(tuple(int(o) for o in offs) for offs in self.tdnn_offsets)

    @property
    def aux_dim(self) -> int:
        return {"none": 0, "i": self.ivector_dim, "p": self.pvector_dim,
                "i+p": self.ivector_dim + self.pvector_dim}[self.aux_mode]

    @property
    def context(self) -> tuple:
        """Frames of left/right context the TDNN stack looks at."""
        return (sum(-min(o) for o in self.tdnn_offsets), sum(max(o) for o in self.tdnn_offsets))


def _check_aux(cfg: ModelConfig, aux, leading_shape):
    if cfg.aux_dim == 0:
        if aux is not None:
            raise AuxModeError("model takes no auxiliary input but aux was given")
        return None
    if aux is None:
        raise AuxModeError(f"aux mode {cfg.aux_mode!r} needs auxiliary vectors")
    aux = np.asarray(aux, dtype=np.float64)
    if aux.shape != tuple(leading_shape) + (cfg.aux_dim,):
        raise AuxModeError(f"aux shape {aux.shape} does not match {tuple(leading_shape) + (cfg.aux_dim,)}")
    return aux


class EncoderModel(Module):
    """Input layer, TDNN stack, p-code layer and the state-logit output layer.

    Features are standardized with fixed training-set statistics before the input
    layer; auxiliary vectors are appended to every frame.
    """

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.buffers["input_mean"] = np.zeros(cfg.feat_dim)
        self.buffers["input_std"] = np.ones(cfg.feat_dim)
        self.children["input"] = TdnnLayer(cfg.feat_dim + cfg.aux_dim, cfg.hidden_dim, (0,), rng)
        for k, offs in enumerate(cfg.tdnn_offsets):
            self.children[f"tdnn{k + 1}"] = TdnnLayer(cfg.hidden_dim, cfg.hidden_dim, offs, rng)
        self.children["pcode"] = TdnnLayer(cfg.hidden_dim, cfg.pcode_dim, (0,), rng)
        self.children["output"] = Affine(cfg.pcode_dim, cfg.num_states, rng, gain=1.0)
        self.training = True

    def set_input_stats(self, frames: np.ndarray):
        self.buffers["input_mean"][:] = frames.mean(0)
        self.buffers["input_std"][:] = np.maximum(frames.std(0), 1e-3)

    def forward(self, feats: np.ndarray, aux: np.ndarray | None = None):
        """(B, T, F) features and (B, T, A) aux -> (logits, pcode) tensors."""
        if feats.ndim != 3 or feats.shape[-1] != self.cfg.feat_dim:
            raise ShapeError(f"encoder expects (B, T, {self.cfg.feat_dim}) features")
        aux = _check_aux(self.cfg, aux, feats.shape[:2])
        x = (feats - self.buffers["input_mean"]) / self.buffers["input_std"]
        if aux is not None:
            x = np.concatenate([x, aux], axis=-1)
        h = Tensor(x)
        for name, layer in self.children.items():
            if name == "output":
                break
            h = layer(h)
        return self.children["output"](h), h


class DecoderModel(Module):
    """Affine+ReLU layers on (p-code, aux) followed by a linear map to feature space.

    The linear output is rescaled by fixed per-dim feature statistics so that the
    reconstruction lives in raw MFCC units.
    """

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        din = cfg.pcode_dim + cfg.aux_dim
        for k in range(cfg.decoder_layers):
            self.children[f"layer{k + 1}"] = Affine(din, cfg.decoder_dim, rng)
            din = cfg.decoder_dim
        self.children["output"] = Affine(din, cfg.feat_dim, rng, gain=1.0)
        self.buffers["output_mean"] = np.zeros(cfg.feat_dim)
        self.buffers["output_scale"] = np.ones(cfg.feat_dim)
        self.training = True

    def set_output_stats(self, frames: np.ndarray):
        self.buffers["output_mean"][:] = frames.mean(0)
        self.buffers["output_scale"][:] = np.maximum(frames.std(0), 1e-3)

    def forward(self, pcode: Tensor, aux: np.ndarray | None = None) -> Tensor:
        if pcode.shape[-1] != self.cfg.pcode_dim:
            raise ShapeError(f"decoder expects p-code dim {self.cfg.pcode_dim}, got {pcode.shape[-1]}")
        aux = _check_aux(self.cfg, aux, pcode.shape[:-1])
        h = pcode if aux is None else concat([pcode, Tensor(aux)])
        for k in range(self.cfg.decoder_layers):
            h = relu(self.children[f"layer{k + 1}"](h))
        out = self.children["output"](h)
        return add_constant(scale(out, self.buffers["output_scale"]), self.buffers["output_mean"])


@dataclass
class AcousticModel:
    encoder: EncoderModel
    decoder: DecoderModel | None
    cfg: ModelConfig
    condition: str = "baseline"


def _per_frame_aux(aux, num_frames):
    if aux is None:
        return None
    aux = np.asarray(aux, dtype=np.float64)
    return aux if len(aux) == num_frames else expand_aux(aux, num_frames)


def _frames(feats) -> np.ndarray:
    return np.asarray(getattr(feats, "frames", feats), dtype=np.float64)


def encoder_forward(m: EncoderModel, feats, aux=None):
    """Inference on one utterance: returns (logits T x S, pcode T x P) arrays.

    ``aux`` may be per-frame (T x A) or per 10-frame chunk; chunk rows are repeated.
    """
    x = _frames(feats)
    aux = _per_frame_aux(aux, len(x))
    was_training = m.training
    m.eval()
    try:
        logits, pcode = m.forward(x[None], None if aux is None else aux[None])
    finally:
        m.train(was_training)
    return logits.value[0], pcode.value[0]


def decoder_forward(d: DecoderModel, pcode: np.ndarray, aux=None) -> np.ndarray:
    pcode = np.asarray(pcode, dtype=np.float64)
    aux = _per_frame_aux(aux, len(pcode))
    return d.forward(Tensor(pcode[None]), None if aux is None else aux[None]).value[0]


# ---------------------------------------------------------------- losses


@dataclass
class LossBreakdown:
    f_ce: float
    f_lfmmi: float
    f_mse: float
    total: float
    frames: int = 0
    alpha: float = 5.0
    beta: float = 5e-14
    epoch: int = 0
    batch: int = 0


@dataclass
class LfmmiResult:
    value: float
    grad: np.ndarray
    num_total: float
    den_total: float


class NumeratorError(ValueError):
    pass


def loss_ce(logits, align) -> float:
    """Summed negative log-softmax probability of the aligned states."""
    states = np.asarray(align.states if isinstance(align, Alignment) else align)
    logits = np.asarray(logits, dtype=np.float64)
    if len(states) != len(logits):
        raise ShapeError("alignment length differs from number of frames")
    return float(nll_loss(log_softmax(Tensor(logits)), states).value)


def loss_lfmmi(logits, num_graph: StateGraph, den_graph: StateGraph) -> LfmmiResult:
    """log p(numerator) - log p(denominator) with logits as frame log-likelihoods."""
    try:
        num = forward_backward(num_graph, logits)
    except GraphError as e:
        raise NumeratorError(f"numerator graph has no path: {e}") from None
    den = forward_backward(den_graph, logits)
    return LfmmiResult(num.log_total - den.log_total, num.posteriors - den.posteriors,
                       num.log_total, den.log_total)


def loss_mse(recon, feats) -> float:
    recon, feats = np.asarray(recon, dtype=np.float64), _frames(feats)
    if recon.shape != feats.shape:
        raise ShapeError(f"reconstruction {recon.shape} vs features {feats.shape}")
    return float(((recon - feats) ** 2).sum())


def total_loss(f_ce: float, f_lfmmi: float, f_mse: float, alpha: float = 5.0, beta: float = 5e-14,
               frames: int = 0) -> LossBreakdown:
    return LossBreakdown(f_ce, f_lfmmi, f_mse, alpha * f_ce - f_lfmmi + beta * f_mse, frames, alpha, beta)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    condition: str = "fdcae"
    alpha: float = 5.0
    beta: float = 5e-14
    beta_effective: float | None = None
    lr: float = 2e-3
    lr_decay: float = 0.95
    epochs: int = 6
    chunk_frames: int = 150
    batch_size: int = 16
    seed: int = 0
    adapt_lr_scale: float = 0.25

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}")

    @property
    def beta_used(self) -> float:
        if self.condition == "baseline":
            return 0.0
        return self.beta if self.beta_effective is None else self.beta_effective


@dataclass
class TrainUtterance:
    utt_id: str
    feats: np.ndarray
    states: np.ndarray
    aux: np.ndarray | None = None  # per frame


@dataclass
class Chunk:
    utt_id: str
    inputs: np.ndarray  # (chunk + context, F)
    aux: np.ndarray | None
    states: np.ndarray  # (chunk,)
    mask: np.ndarray  # (chunk,)
    length: int
    num_graph: StateGraph
    partial: bool


def prepare_chunks(utts, topology: HmmTopology, phone_lm: PhoneLM, cfg: ModelConfig,
                   chunk_frames: int = 150) -> list:
    """Cut utterances into fixed-length chunks with TDNN context taken from the utterance.

    Frames outside the utterance are edge replicates; frames past its end are masked.
    Each chunk's numerator graph follows the phones its alignment visits; chunks that do
    not cover a whole utterance get partial (enter/leave anywhere) graphs.
    """
    left, right = cfg.context
    inv = topology.inventory
    chunks = []
    for u in utts:
        feats = _frames(u.feats)
        T = len(feats)
        if len(u.states) != T:
            raise ShapeError(f"{u.utt_id}: {len(u.states)} alignment frames vs {T} feature frames")
        aux = _per_frame_aux(u.aux, T)
        for s in range(0, T, chunk_frames):
            e = min(s + chunk_frames, T)
            idx = np.clip(np.arange(s - left, s + chunk_frames + right), 0, T - 1)
            cidx = np.clip(np.arange(s, s + chunk_frames), 0, T - 1)
            phones = [inv.phones[i] for i in topology.phones_of(u.states[s:e])]
            partial = not (s == 0 and e == T)
            num = build_numerator_graph(phones, topology, phone_lm, partial=partial)
            chunks.append(Chunk(u.utt_id, feats[idx], None if aux is None else aux[idx],
                                np.asarray(u.states)[cidx], np.arange(s, s + chunk_frames) < T, e - s,
                                num, partial))
    return chunks


def _check_data_aux(cfg: ModelConfig, utts):
    for u in utts:
        if (u.aux is None) != (cfg.aux_dim == 0):
            raise AuxModeError(f"{u.utt_id}: auxiliary data does not match aux mode {cfg.aux_mode!r}")
        if u.aux is not None and np.asarray(u.aux).shape[-1] != cfg.aux_dim:
            raise AuxModeError(f"{u.utt_id}: aux dim {np.asarray(u.aux).shape[-1]} != {cfg.aux_dim}")


def train_step(model: AcousticModel, batch, dens: dict, alpha: float, beta: float, opt: Adam | None = None):
    """Forward/backward on one minibatch of chunks; applies an optimizer step if given.

    Returns (LossBreakdown, the total-loss tensor). With beta == 0 the decoder, if any,
    is evaluated detached so it cannot influence the encoder's update.
    """
    enc, dec = model.encoder, model.decoder
    left, _ = model.cfg.context
    C = len(batch[0].states)
    X = np.stack([c.inputs for c in batch])
    A = None if batch[0].aux is None else np.stack([c.aux for c in batch])
    states = np.stack([c.states for c in batch])
    mask = np.stack([c.mask for c in batch]).astype(np.float64)
    lengths = np.array([c.length for c in batch])
    enc.zero_grad()
    if dec is not None:
        dec.zero_grad()
    logits_full, pcode_full = enc.forward(X, A)
    logits = crop(logits_full, left, C)
    pcode = crop(pcode_full, left, C)
    ce = nll_loss(log_softmax(logits), states, mask)

    lv = logits.value
    num_tot, num_post = forward_backward_batch([c.num_graph for c in batch], lv, lengths)
    den_tot, den_post = forward_backward_batch([dens[c.partial] for c in batch], lv, lengths)
    ok = np.isfinite(num_tot)
    if not ok.all():
        for c in [c for c, k in zip(batch, ok) if not k]:
            log.warning("skipping chunk of %s: numerator graph has no surviving path", c.utt_id)
    f_lfmmi = float(np.sum((num_tot - den_tot)[ok]))
    grad = (num_post - den_post) * ok[:, None, None]
    lfmmi = custom_loss(logits, f_lfmmi, grad)

    total = scale(ce, alpha) - lfmmi
    f_mse = 0.0
    if dec is not None:
        A_c = None if A is None else A[:, left:left + C]
        target = X[:, left:left + C]
        if beta != 0.0:
            mse = sum_squared_error(dec.forward(pcode, A_c), target, mask)
            total = total + scale(mse, beta)
        else:
            mse = sum_squared_error(dec.forward(Tensor(pcode.value), A_c), target, mask)
        f_mse = float(mse.value)
    bd = total_loss(float(ce.value), f_lfmmi, f_mse, alpha, beta, int(mask.sum()))
    bd.total = float(total.value)
    if opt is not None and np.isfinite(bd.total):
        total.backward()
        opt.step()
    return bd, total


@dataclass
class TrainLog:
    minibatches: list = field(default_factory=list)

    def epochs(self) -> list:
        """Per-epoch sums of the minibatch breakdowns."""
        out = {}
        for b in self.minibatches:
            e = out.setdefault(b.epoch, LossBreakdown(0.0, 0.0, 0.0, 0.0, 0, b.alpha, b.beta, b.epoch, 0))
            e.f_ce += b.f_ce
            e.f_lfmmi += b.f_lfmmi
            e.f_mse += b.f_mse
            e.total += b.total
            e.frames += b.frames
            e.batch += 1
        return [out[k] for k in sorted(out)]

    def write_csv(self, path) -> None:
        cols = ["epoch", "batch", "frames", "f_ce", "f_lfmmi", "f_mse", "total", "alpha", "beta"]
        lines = [",".join(cols)]
        for b in self.minibatches:
            lines.append(",".join(repr(getattr(b, c)) if isinstance(getattr(b, c), float) else str(getattr(b, c))
                                  for c in cols))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _denominators(phone_lm, topology):
    return {False: build_denominator_graph(phone_lm, topology, chunk_mode=False),
            True: build_denominator_graph(phone_lm, topology, chunk_mode=True)}


def _run_epochs(model, chunks, dens, cfg: TrainConfig, epochs, lr, shuffle_rng, out_dir, train_log,
                epoch_offset=0):
    beta = cfg.beta_used
    params = model.encoder.parameters()
    if model.decoder is not None and beta != 0.0:
        params = params + model.decoder.parameters()
    opt = Adam(params, lr=lr, decay=cfg.lr_decay)
    model.encoder.train()
    if model.decoder is not None:
        model.decoder.train()
    for epoch in range(epoch_offset + 1, epoch_offset + epochs + 1):
        order = shuffle_rng.permutation(len(chunks))
        for b, start in enumerate(range(0, len(chunks), cfg.batch_size)):
            batch = [chunks[i] for i in order[start:start + cfg.batch_size]]
            bd, _ = train_step(model, batch, dens, cfg.alpha, beta, opt)
            bd.epoch, bd.batch = epoch, b
            train_log.minibatches.append(bd)
            if not np.isfinite(bd.total):
                ckpt = None
                if out_dir is not None:
                    ckpt = Path(out_dir) / f"diverged_epoch{epoch:03d}_batch{b:04d}.npz"
                    save_model(ckpt, model, {"epoch": epoch, "batch": b})
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b}: {bd}", ckpt)
        opt.end_epoch()
        ep = train_log.epochs()[-1]
        log.info("epoch %d: ce/frame %.4f lfmmi/frame %.4f mse/frame %.4f", epoch, ep.f_ce / ep.frames,
                 ep.f_lfmmi / ep.frames, ep.f_mse / ep.frames)
        if out_dir is not None:
            save_model(Path(out_dir) / f"epoch{epoch:03d}.npz", model, {"epoch": epoch})
    model.encoder.eval()
    if model.decoder is not None:
        model.decoder.eval()


def build_model(model_cfg: ModelConfig, train_cfg: TrainConfig, utts=None) -> AcousticModel:
    """Fresh encoder (and decoder for f-DcAE); independent RNG streams per part."""
    enc_seed, dec_seed, _ = np.random.SeedSequence(train_cfg.seed).spawn(3)
    enc = EncoderModel(model_cfg, np.random.default_rng(enc_seed))
    dec = DecoderModel(model_cfg, np.random.default_rng(dec_seed)) if train_cfg.condition == "fdcae" else None
    if utts:
        frames = np.concatenate([_frames(u.feats) for u in utts])
        enc.set_input_stats(frames)
        if dec is not None:
            dec.set_output_stats(frames)
    return AcousticModel(enc, dec, model_cfg, train_cfg.condition)


def train(utts, topology: HmmTopology, phone_lm: PhoneLM, model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir=None):
    """Train from scratch. Returns (AcousticModel, TrainLog)."""
    _check_data_aux(model_cfg, utts)
    model = build_model(model_cfg, train_cfg, utts)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(train_cfg.seed).spawn(3)[2])
    chunks = prepare_chunks(utts, topology, phone_lm, model_cfg, train_cfg.chunk_frames)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    train_log = TrainLog()
    _run_epochs(model, chunks, _denominators(phone_lm, topology), train_cfg, train_cfg.epochs, train_cfg.lr,
                shuffle_rng, out_dir, train_log)
    if out_dir is not None:
        train_log.write_csv(Path(out_dir) / "loss_log.csv")
    return model, train_log


def adapt(seed_model: AcousticModel, utts, topology: HmmTopology, phone_lm: PhoneLM, train_cfg: TrainConfig,
          epochs: int = 1, out_dir=None):
    """Continue training a copy of ``seed_model`` with the learning rate scaled down.

    Returns (adapted model, TrainLog). Zero epochs returns an unchanged copy.
    """
    _check_data_aux(seed_model.cfg, utts)
    model = copy.deepcopy(seed_model)
    train_log = TrainLog()
    if epochs <= 0:
        return model, train_log
    cfg = copy.copy(train_cfg)
    cfg.condition = seed_model.condition
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1]).generate_state(1)[0])
    chunks = prepare_chunks(utts, topology, phone_lm, seed_model.cfg, cfg.chunk_frames)
    _run_epochs(model, chunks, _denominators(phone_lm, topology), cfg, epochs, cfg.lr * cfg.adapt_lr_scale,
                shuffle_rng, out_dir, train_log)
    return model, train_log


# ---------------------------------------------------------------- persistence


def save_model(path, model: AcousticModel, meta: dict | None = None) -> None:
    cfg = asdict(model.cfg)
    info = {"model_config": cfg, "condition": model.condition, **(meta or {})}
    save_checkpoint(path, {"encoder": model.encoder, "decoder": model.decoder}, meta=info)


def load_model(path, with_decoder: bool = True) -> AcousticModel:
    from .nnet import read_manifest

    meta = read_manifest(path)["meta"]
    cfg = ModelConfig(**meta["model_config"])
    rng = np.random.default_rng(0)
    enc = EncoderModel(cfg, rng)
    has_dec = "decoder" in read_manifest(path)["layers"]
    dec = DecoderModel(cfg, rng) if (with_decoder and has_dec) else None
    load_checkpoint(path, {"encoder": enc, "decoder": dec})
    enc.eval()
    if dec is not None:
        dec.eval()
    return AcousticModel(enc, dec, cfg, meta["condition"])


def config_to_json(cfg) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)
