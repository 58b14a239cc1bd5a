"""The experiment matrix: conditions x aux modes x seeds, every test set, plus adaptation arms.

Each (condition, aux, seed) task is independent; with ``jobs > 1`` tasks run in worker processes
and results are merged by the parent in a fixed order, so the report does not depend on scheduling.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import ExperimentConfig
from ..fdcae import (AUX_MODES, CONDITIONS, AcousticModel, ModelConfig, TrainConfig, TrainingDiverged, adapt,
                     save_model, train)
from ..pitch import compute_speaker_pitch_stats
from .decode import DecodeResult, corpus_per, decode_utterance
from .pipeline import Workspace, prepare_all

log = logging.getLogger(__name__)

# adaptation arm name -> (adaptation training set, test set)
ADAPT_ARMS = {"adapt-child": ("child_train", "child_test"), "adapt-accent": ("accent_train", "accent_test")}
PITCH_SETS = ("adult_train", "child_train", "child_test", "accent_train")


@dataclass
class Cell:
    condition: str
    aux: str
    test_set: str
    seed: int
    per: float | None = None
    status: str = "ok"  # ok | skipped
    reason: str = ""

    @property
    def key(self) -> tuple:
        return (self.condition, self.aux, self.test_set, self.seed)


@dataclass
class LossRow:
    condition: str
    aux: str
    seed: int
    epoch: int
    frames: int
    f_ce: float
    f_lfmmi: float
    f_mse: float
    total: float


@dataclass
class RunReport:
    cells: list = field(default_factory=list)
    loss_curves: list = field(default_factory=list)
    pitch_stats: dict = field(default_factory=dict)  # speaker -> SpeakerPitchStats
    config_echo: str = ""
    runtime_s: float = 0.0

    def lookup(self, condition, aux, test_set, seed) -> Cell | None:
        for c in self.cells:
            if c.key == (condition, aux, test_set, seed):
                return c
        return None

    def failures(self) -> list:
        """Cells skipped because something went wrong (as opposed to skipped by configuration)."""
        return [c for c in self.cells if c.status == "skipped" and c.reason.startswith("error")]

    def summary(self) -> dict:
        """(condition, aux, test_set) -> (mean, std, n) over completed seeds."""
        groups: dict = {}
        for c in self.cells:
            if c.status == "ok":
                groups.setdefault((c.condition, c.aux, c.test_set), []).append(c.per)
        return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in sorted(groups.items())}


def parse_condition(spec: str) -> tuple:
    """'fdcae:i+p' -> ('fdcae', 'i+p')."""
    cond, _, mode = spec.partition(":")
    mode = mode or "none"
    if cond not in CONDITIONS or mode not in AUX_MODES:
        raise ValueError(f"bad matrix condition {spec!r}")
    return cond, mode


def model_config(cfg: ExperimentConfig, mode: str) -> ModelConfig:
    return ModelConfig(hidden_dim=cfg.model.hidden_dim, pcode_dim=cfg.model.pcode_dim,
                       decoder_dim=cfg.model.decoder_dim, aux_mode=mode, ivector_dim=cfg.features.ivector_dim)


def train_config(cfg: ExperimentConfig, condition: str, seed: int) -> TrainConfig:
    t = cfg.train
    return TrainConfig(condition=condition, alpha=t.alpha, beta=t.beta, beta_effective=t.beta_effective, lr=t.lr,
                       lr_decay=t.lr_decay, epochs=t.epochs, chunk_frames=t.chunk_frames, batch_size=t.batch_size,
                       seed=seed, adapt_lr_scale=t.adapt_lr_scale)


def model_name(condition: str, mode: str, seed: int, arm: str = "") -> str:
    return f"{condition}_{mode}_s{seed}" + (f"_{arm}" if arm else "")


def checkpoint_path(ws: Workspace, condition: str, mode: str, seed: int, arm: str = "") -> Path:
    return ws.root / "am" / f"{model_name(condition, mode, seed, arm)}.npz"


def references(ws: Workspace, name: str) -> dict:
    sil = ws.topology.inventory.phones[0]
    return {r.utt_id: [p for p in r.transcript if p != sil] for r in ws.manifest(name)}


def decode_set(ws: Workspace, model: AcousticModel, name: str) -> dict:
    feats, aux = ws.features(name), ws.aux(name, model.cfg.aux_mode)
    return {r.utt_id: decode_utterance(model, feats[r.utt_id], aux[r.utt_id], ws.den_graph(), ws.topology, r.utt_id)
            for r in ws.manifest(name)}


def score_set(ws: Workspace, name: str, hyps: dict) -> float:
    return corpus_per({u: d.phones if isinstance(d, DecodeResult) else d for u, d in hyps.items()},
                      references(ws, name))


def write_hypotheses(path, hyps: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{u}\t{' '.join(d.phones)}\t{'flagged' if d.flagged else ''}".rstrip("\t") for u, d in hyps.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_hypotheses(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        out[parts[0]] = parts[1].split() if len(parts) > 1 else []
    return out


def _loss_rows(condition, mode, seed, train_log) -> list:
    return [LossRow(condition, mode, seed, e.epoch, e.frames, e.f_ce, e.f_lfmmi, e.f_mse, e.total)
            for e in train_log.epochs()]


def adaptation_cells(condition: str, mode: str, seed: int, arms=ADAPT_ARMS) -> list:
    return [(f"{condition}+{arm}", mode, test, seed) for arm, (_, test) in arms.items()]


def planned_cells(cfg: ExperimentConfig, ws: Workspace) -> list:
    """Every cell the configuration asks for, in report order."""
    keys = []
    for spec in cfg.matrix.conditions:
        cond, mode = parse_condition(spec)
        for seed in cfg.matrix.seeds:
            keys += [(cond, mode, t, seed) for t in ws.test_sets()]
            if spec in cfg.matrix.adapt_conditions:
                keys += adaptation_cells(cond, mode, seed)
    return keys


def run_task(root, cfg: ExperimentConfig, condition: str, mode: str, seed: int) -> tuple:
    """Train one model, decode every test set and run its adaptation arms. Returns (cells, loss rows)."""
    ws = Workspace(root, cfg)
    tests = ws.test_sets()
    spec = f"{condition}:{mode}"
    adapt_keys = adaptation_cells(condition, mode, seed) if spec in cfg.matrix.adapt_conditions else []
    tc = train_config(cfg, condition, seed)
    try:
        utts = ws.train_utterances(ws.train_sets(), mode)
        model, train_log = train(utts, ws.topology, ws.phone_lm(), model_config(cfg, mode), tc)
    except (TrainingDiverged, ValueError, FloatingPointError) as e:
        log.error("%s seed %d failed: %s", spec, seed, e)
        reason = f"error: training failed ({type(e).__name__}: {e})"
        return [Cell(*k, status="skipped", reason=reason)
                for k in [(condition, mode, t, seed) for t in tests] + adapt_keys], []
    ckpt = checkpoint_path(ws, condition, mode, seed)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_model(ckpt, model, {"seed": seed})
    cells = [Cell(condition, mode, t, seed, score_set(ws, t, decode_set(ws, model, t))) for t in tests]
    rows = _loss_rows(condition, mode, seed, train_log)
    for (arm, (train_set, test_set)), key in zip(ADAPT_ARMS.items(), adapt_keys):
        try:
            adapted, alog = adapt(model, ws.train_utterances([ws.training_name(train_set)], mode), ws.topology,
                                  ws.phone_lm(), tc, epochs=cfg.train.adapt_epochs)
        except (TrainingDiverged, ValueError, FloatingPointError) as e:
            cells.append(Cell(*key, status="skipped", reason=f"error: adaptation failed ({e})"))
            continue
        save_model(checkpoint_path(ws, condition, mode, seed, arm), adapted, {"seed": seed, "adapted_on": train_set})
        cells.append(Cell(*key, score_set(ws, test_set, decode_set(ws, adapted, test_set))))
        rows += _loss_rows(key[0], mode, seed, alog)
    return cells, rows


def _task_entry(args):
    return run_task(*args)


def collect_pitch_stats(ws: Workspace) -> dict:
    tracks, groups = {}, {}
    for name in PITCH_SETS:
        tr = ws.tracks(name)
        for r in ws.manifest(name):
            tracks.setdefault(r.speaker_id, []).append(tr[r.utt_id])
            groups[r.speaker_id] = r.group
    return compute_speaker_pitch_stats(tracks, groups)


def run_matrix(cfg: ExperimentConfig, root, jobs: int | None = None) -> RunReport:
    """Prepare data, run every configured cell and assemble the report."""
    from ..config import config_to_ini

    t0 = time.time()
    ws = prepare_all(Workspace(root, cfg))
    tasks = []
    for spec in cfg.matrix.conditions:
        cond, mode = parse_condition(spec)
        tasks += [(str(ws.root), cfg, cond, mode, seed) for seed in cfg.matrix.seeds]
    jobs = jobs or cfg.matrix.jobs
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_task_entry, tasks))
    else:
        results = [_task_entry(t) for t in tasks]
    found = {}
    curves = []
    for cells, rows in results:
        for c in cells:
            found[c.key] = c
        curves += rows
    report = RunReport(loss_curves=curves, pitch_stats=collect_pitch_stats(ws), config_echo=config_to_ini(cfg))
    for key in planned_cells(cfg, ws):
        report.cells.append(found.get(key) or Cell(*key, status="skipped", reason="error: cell not produced"))
    report.runtime_s = time.time() - t0
    return report
