# src/router/main_router.py

import json
import os
import sys
import time
from collections import Counter
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

# Подключаем пути к src, чтобы модуль запускался и напрямую, и из тестов
CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))
SRC_DIR = os.path.dirname(CURRENT_DIR)
if SRC_DIR not in sys.path:
    sys.path.insert(0, SRC_DIR)

from ccrft.grpo import RftEnvironment, RftResult, rft_train
from ccrft.pid import corridor_fraction
from ccrft.reward import variant_weights
from config import RFT_VARIANTS, RunConfig
from consensus.calibration import calibrator_from_json, calibrator_to_json, fit_calibrator
from consensus.voting import class_scores, fit_conformal_threshold
from data_layer.checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from data_layer.run_store import RunStore, file_sha256
from index.audit import audit_leakage
from index.dedup import IngestGate, media_from_clip
from index.ivfpq import IvfPqIndex
from index.keys import build_keys, pixel_encoder
from layout_engine.plot_export import export_plots
from metrics.fidelity import sim_behav_sensitivity, visfid
from metrics.process import (
    max_deviation, process_record, process_summary, racpr_sensitivity, tool_step_embeddings, validity_bits,
)
from metrics.selective import Decision, bootstrap_ci, risk_coverage
from percept.dynamics import DynamicsHead, train_dynamics
from percept.embedding import Projector, embed_inputs
from percept.encoder import FrozenEncoder, input_dim, step_inputs, trace_pairs, transition_rows
from percept.zstats import ZStats, fit_zstats, zstats_from_json, zstats_to_json
from policy.model import PolicyParams, Trajectory, sample_trajectory
from policy.sft import sft_train
from toyworld.codec import decode_clip, decode_query, decode_trace, encode_clip, encode_query, encode_trace
from toyworld.scene import Clip, Query, make_split
from toyworld.teacher import TeacherTrace, decisive_rate, generate_teacher_traces
from ttrl.loop import TtrlContext, TtrlState
from ttrl.online import StreamItem, make_probe_split, run_online
from utils.errors import DependencyError, TrainingError
from utils.logger import get_logger
from utils.seeding import derive_seed, make_rng

logger = get_logger("pixelsoul-router")

CORPUS_SCHEMA = "pixelsoul.corpus"
SFT_SCHEMA = "pixelsoul.sft"
RFT_SCHEMA = "pixelsoul.rft"
TTRL_SCHEMA = "pixelsoul.ttrl"

STEP_DIM = 64
RISK_DELTAS = tuple(round(d, 2) for d in np.linspace(0.0, 1.0, 21))
BAR_FIELDS = {"accuracy": "correct", "rapr": "rapr", "racpr": "racpr", "visfid": "visfid", "chain_length": "length"}

CorpusItem = Tuple[Clip, Query, List[TeacherTrace]]


class PixelSoulRouter:
    """
    PixelSoulRouter = 'начальник цеха'.
    Он ведёт прогон по стадиям:
    generate → sft → rft → ttrl, плюс audit / metrics / ablate.
    Каждая стадия читает артефакты предыдущей через RunStore и возвращает словарь-результат.

    Важно: это бизнес-логика. Никакого argparse здесь, CLI живёт в main.py.
    """

    def __init__(self, cfg: RunConfig, store: Optional[RunStore] = None):
        self.cfg = cfg
        self.seed = cfg.pipeline.seed
        self.store = store or RunStore.for_config_hash(cfg.pipeline.out_dir, cfg.lineage_hash())
        self._dynamics: Optional[DynamicsHead] = None

    # -------------------------------------------------------------------------
    # ВСПОМОГАТЕЛЬНОЕ
    # -------------------------------------------------------------------------

    def _meta(self) -> Dict[str, Any]:
        return {"config_hash": self.cfg.config_hash(), "seed": self.seed, "run_id": self.store.run_id}

    def step_encoder(self) -> FrozenEncoder:
        """Замороженный внешний энкодер шагов для RaCPR и Coh в TTRL; никогда не обучается."""
        return FrozenEncoder.build(input_dim(self.cfg.world.n_codes), STEP_DIM,
                                   seed=derive_seed(self.cfg.index.encoder_seed, "steps"))

    def read_corpus(self, path: Path) -> Dict[str, List[CorpusItem]]:
        _, records = self.store.read_stream(path, CORPUS_SCHEMA)
        out: Dict[str, List[CorpusItem]] = {"train": [], "dev": []}
        for rec in records:
            out[rec["split"]].append((
                decode_clip(rec["clip"]), decode_query(rec["query"]), [decode_trace(t) for t in rec["traces"]],
            ))
        return out

    def _corpus(self, stage: str) -> Dict[str, List[CorpusItem]]:
        return self.read_corpus(self.store.require("corpus.jsonl", stage))

    def _latest_of(self, names: Sequence[str], stage: str) -> Path:
        for name in names:
            path = self.store.latest(name)
            if path is not None:
                return path
        raise DependencyError(f"{stage}: нет ни одного из {list(names)} в {self.store.root}")

    def read_zstats(self, path: Path) -> Dict[str, ZStats]:
        return zstats_from_json(path.read_text(encoding="utf-8"))

    @staticmethod
    def _fit_zstats(items: Sequence[CorpusItem], embed: Callable[[Clip, TeacherTrace], np.ndarray],
                    stage: str) -> Dict[str, ZStats]:
        by_kind: Dict[str, List[np.ndarray]] = {}
        for clip, query, traces in items:
            for t in traces:
                if t.accepted:
                    by_kind.setdefault(query.kind, []).append(embed(clip, t))
        out: Dict[str, ZStats] = {}
        for kind, seqs in sorted(by_kind.items()):
            try:
                out[kind] = fit_zstats(seqs, kind)
            except ValueError as e:
                logger.warning(f"{stage}: z-stats for {kind} skipped ({e})")
        return out

    # -------------------------------------------------------------------------
    # GENERATE
    # -------------------------------------------------------------------------

    def generate(self) -> Dict[str, Any]:
        """Корпус: train/dev клипы, запросы и траектории учителя с пометкой accepted."""
        cfg = self.cfg
        records: List[Dict[str, Any]] = []
        pool: List[TeacherTrace] = []
        for split, n in (("train", cfg.pipeline.n_train), ("dev", cfg.pipeline.n_dev)):
            for i, (clip, query) in enumerate(make_split(cfg.world, n, self.seed, split)):
                traces = generate_teacher_traces(clip, query, cfg.teacher.traces_per_query, cfg.noise,
                                                 cfg.teacher, seed=derive_seed(self.seed, "teacher", split, i))
                pool.extend(traces)
                records.append({
                    "split": split,
                    "clip": encode_clip(clip),
                    "query": encode_query(query),
                    "traces": [encode_trace(t) for t in traces],
                })
        path = self.store.write_stream("corpus.jsonl", CORPUS_SCHEMA, records, self._meta())
        accepted = sum(1 for t in pool if t.accepted)
        corpus_hash = file_sha256(path)
        logger.info(f"Generate: {len(records)} items, {accepted}/{len(pool)} traces accepted, hash={corpus_hash[:12]}")
        return {
            "ok": True,
            "stage": "generate",
            "path": path.name,
            "corpus_hash": corpus_hash,
            "items": len(records),
            "traces": len(pool),
            "accepted": accepted,
            "decisive_rate": decisive_rate(pool),
            "message": f"Корпус собран: {len(records)} запросов, принято {accepted} траекторий.",
        }

    # -------------------------------------------------------------------------
    # SFT
    # -------------------------------------------------------------------------

    def sft(self) -> Dict[str, Any]:
        """
        Фаза 1 плюс всё, что замораживается после неё: z-статистики (внешний энкодер
        и проектор), калибратор и конформный порог на dev.
        """
        cfg = self.cfg
        corpus = self._corpus("SFT")
        clips = {c.clip_id: c for split in corpus.values() for c, _, _ in split}
        traces = [t for _, _, ts in corpus["train"] for t in ts]
        result = sft_train(traces, clips, cfg.sft, cfg.world, seed=self.seed)
        log = self.store.write_stream("sft_log.jsonl", SFT_SCHEMA, result.history, self._meta())

        d = cfg.dynamics
        projector = Projector.init(input_dim(cfg.world.n_codes), d.embed_hidden, d.embed_dim,
                                   seed=derive_seed(self.seed, "projector"), layernorm=d.embed_layernorm)
        encoder = self.step_encoder()
        step_stats = self._fit_zstats(
            corpus["dev"], lambda clip, t: encoder.encode_steps(clip, [(s.call, s.obs) for s in t.steps]), "SFT")
        proj_stats = self._fit_zstats(
            corpus["dev"], lambda clip, t: embed_inputs(projector, step_inputs(clip, trace_pairs(t)))[0], "SFT")

        # калибровка и конформный порог на dev-роллаутах политики после SFT
        logits, labels, vote_scores = [], [], []
        for i, (clip, query, _) in enumerate(corpus["dev"]):
            rng = make_rng(self.seed, "calibration", i)
            trajs = [sample_trajectory(result.params, clip, query, cfg.ttrl.max_steps, cfg.noise, rng)
                     for _ in range(cfg.ttrl.n_rollouts)]
            for t in trajs:
                logits.append(np.log(np.clip(t.answer_probs, 1e-12, None)))
                labels.append(query.answer)
            answers = [int(t.answer) for t in trajs]
            vote_scores.append(class_scores(answers, np.full(len(answers), 1.0 / len(answers)), cfg.world.n_answers))
        calibrator = fit_calibrator(np.stack(logits), labels, cfg.consensus)
        threshold = fit_conformal_threshold(vote_scores, [q.answer for _, q, _ in corpus["dev"]],
                                            cfg.consensus.conformal_lambda)

        ckpt = save_checkpoint(self.store.fresh_path("sft.npz"), Checkpoint(
            result.params, result.heads, projector, None, result.normalizer, result.tool_scalers, stage="sft"))
        self.store.write_text("zstats_steps.json", zstats_to_json(list(step_stats.values())))
        self.store.write_text("zstats_projector.json", zstats_to_json(list(proj_stats.values())))
        self.store.write_text("calibrator.json", calibrator_to_json(calibrator))
        self.store.write_json("conformal.json", {"threshold": threshold, "lambda": cfg.consensus.conformal_lambda})
        logger.info(f"SFT: {len(result.history)} epochs, rolled_back={result.rolled_back}, "
                    f"calibrator={calibrator.kind}, conformal threshold={threshold:.3f}")
        return {
            "ok": True,
            "stage": "sft",
            "checkpoint": ckpt.name,
            "log": log.name,
            "epochs": len(result.history),
            "rolled_back": result.rolled_back,
            "dev_loss": result.history[-1]["dev_loss"],
            "conformal_threshold": threshold,
            "message": f"SFT готов: {len(result.history)} эпох, чекпоинт {ckpt.name}.",
        }

    # -------------------------------------------------------------------------
    # CC-RFT
    # -------------------------------------------------------------------------

    def _dynamics_head(self, items: Sequence[CorpusItem]) -> DynamicsHead:
        """Голова динамики учится один раз на переходах принятых траекторий учителя."""
        if self._dynamics is None:
            rows = [transition_rows(clip, trace_pairs(t)) for clip, _, ts in items for t in ts if t.accepted]
            if not rows:
                raise TrainingError("Dynamics: в train нет принятых траекторий учителя")
            X = np.concatenate([r[0] for r in rows])
            Y = np.concatenate([r[1] for r in rows])
            R = np.concatenate([r[2] for r in rows])
            self._dynamics = train_dynamics(X, Y, R, self.cfg.dynamics, seed=derive_seed(self.seed, "dynamics"))
        return self._dynamics

    def _train_rft(self, ckpt: Checkpoint, corpus: Dict[str, List[CorpusItem]],
                   variant: str) -> Tuple[RftEnvironment, RftResult]:
        cfg = self.cfg
        if ckpt.projector is None:
            raise DependencyError("RFT: в SFT-чекпоинте нет проектора")
        weights = variant_weights(variant, cfg.rewards)
        env = RftEnvironment(
            clips={c.clip_id: c for c, _, _ in corpus["train"]},
            weights=weights,
            noise=cfg.noise,
            max_steps=cfg.sft.max_steps,
            projector=ckpt.projector.copy(),
            zstats=self.read_zstats(self.store.require("zstats_projector.json", "RFT")),
            dynamics=self._dynamics_head(corpus["train"]) if weights.w2 > 0 else None,
            dynamics_cfg=cfg.dynamics,
        )
        prompts = [(c.clip_id, q) for c, q, _ in corpus["train"]]
        result = rft_train(ckpt.policy, ckpt.policy.copy(), env, prompts, cfg.rft, cfg.pid,
                           seed=derive_seed(self.seed, "rft", variant))
        return env, result

    def rft(self) -> Dict[str, Any]:
        cfg = self.cfg
        ckpt = load_checkpoint(self.store.require("sft.npz", "RFT"))
        corpus = self._corpus("RFT")
        env, result = self._train_rft(ckpt, corpus, cfg.rft.variant)
        log = self.store.write_stream("rft_log.jsonl", RFT_SCHEMA, result.records,
                                      {**self._meta(), "variant": cfg.rft.variant})
        path = save_checkpoint(self.store.fresh_path("rft.npz"), Checkpoint(
            result.params, ckpt.heads, env.projector, env.dynamics, ckpt.normalizer, ckpt.tool_scalers, stage="rft"))
        kl = [r["kl"] for r in result.records]
        return {
            "ok": True,
            "stage": "rft",
            "variant": cfg.rft.variant,
            "checkpoint": path.name,
            "log": log.name,
            "updates": len(result.records),
            "kl_last": kl[-1] if kl else 0.0,
            "corridor_fraction": corridor_fraction(kl, cfg.ttrl.corridor_min, cfg.ttrl.corridor_max,
                                                   min(cfg.pid.warmup, len(kl) // 2)),
            "message": f"CC-RFT ({cfg.rft.variant}) готов: {len(result.records)} обновлений.",
        }

    # -------------------------------------------------------------------------
    # TTRL
    # -------------------------------------------------------------------------

    def ttrl_artifacts(self) -> Dict[str, str]:
        """Имена файлов, из которых собирается онлайн-прогон; пишутся в заголовок лога для replay."""
        return {
            "checkpoint": self._latest_of(("rft.npz", "sft.npz"), "TTRL").name,
            "corpus": self.store.require("corpus.jsonl", "TTRL").name,
            "zstats": self.store.require("zstats_steps.json", "TTRL").name,
            "calibrator": self.store.require("calibrator.json", "TTRL").name,
            "conformal": self.store.require("conformal.json", "TTRL").name,
        }

    def ttrl_setup(self, artifacts: Dict[str, str]) -> Tuple[TtrlState, List[StreamItem], List[StreamItem], TtrlContext]:
        """
        Состояние и контекст онлайн-прогона. Индекс заполняется ключами train-сплита,
        probe-сплит ставится в белый список до первого поиска.
        """
        cfg, root = self.cfg, self.store.root
        ckpt = load_checkpoint(root / artifacts["checkpoint"])
        corpus = self.read_corpus(root / artifacts["corpus"])
        calibrator = calibrator_from_json((root / artifacts["calibrator"]).read_text(encoding="utf-8"))
        threshold = json.loads((root / artifacts["conformal"]).read_text(encoding="utf-8"))["threshold"]

        stream = make_split(cfg.world, cfg.pipeline.n_stream, self.seed, "stream")
        probe = make_probe_split(cfg.world, cfg.pipeline.n_probe, self.seed, cfg.ttrl)

        key_encoder = pixel_encoder(cfg.world.n_codes, cfg.index)
        index = IvfPqIndex(cfg.index)
        index.install_whitelist(q.query_id for _, q in probe)
        keys = []
        for clip, query, traces in corpus["train"]:
            best = next((t for t in traces if t.accepted), None)
            steps = best.steps if best is not None else []
            keys.append(build_keys(clip, query, [s.obs for s in steps], key_encoder, cfg.index,
                                   calls=[s.call for s in steps], source_id=query.query_id))
        index.build(keys)

        ctx = TtrlContext(
            index=index,
            key_encoder=key_encoder,
            step_encoder=self.step_encoder(),
            index_cfg=cfg.index,
            rcpr=cfg.rcpr,
            consensus=cfg.consensus,
            noise=cfg.noise,
            calibrator=calibrator,
            zstats=self.read_zstats(root / artifacts["zstats"]),
            dynamics=ckpt.dynamics,
            dynamics_cfg=cfg.dynamics,
            conformal_threshold=threshold,
        )
        return TtrlState.start(ckpt.policy, cfg.ttrl, cfg.pid), stream, probe, ctx

    def ttrl(self) -> Dict[str, Any]:
        cfg = self.cfg
        artifacts = self.ttrl_artifacts()
        meta = {
            **self._meta(),
            "config": cfg.to_dict(),
            "artifacts": artifacts,
            "checkpoint_sha256": file_sha256(self.store.root / artifacts["checkpoint"]),
            "variant": cfg.ttrl.variant,
        }
        log = self.store.start_stream("ttrl_log.jsonl", TTRL_SCHEMA, meta)
        state, stream, probe, ctx = self.ttrl_setup(artifacts)
        state, report = run_online(state, stream, probe, ctx, cfg.ttrl, budget=cfg.pipeline.budget,
                                   seed=self.seed, on_record=lambda rec: self.store.append(log, rec))
        ckpt = save_checkpoint(self.store.fresh_path("ttrl.npz"), Checkpoint(state.policy, stage="ttrl"))
        index_path = ctx.index.save(self.store.fresh_path("index.bin"))
        summary = report.summary()
        summary.update({"kl_series": report.kl_series, "log": log.name, "checkpoint": ckpt.name,
                        "index": index_path.name, "index_size": len(ctx.index)})
        path = self.store.write_json("ttrl_report.json", summary)
        return {
            "ok": True,
            "stage": "ttrl",
            "report": path.name,
            "log": log.name,
            "checkpoint": ckpt.name,
            **{k: summary[k] for k in ("variant", "steps", "accepted", "pre_accuracy", "post_accuracy",
                                       "kl_p50", "kl_p95", "corridor_fraction")},
            "message": f"TTRL ({cfg.ttrl.variant}): точность {report.pre_accuracy:.3f} → {report.post_accuracy:.3f}.",
        }

    # -------------------------------------------------------------------------
    # AUDIT
    # -------------------------------------------------------------------------

    def audit(self) -> Dict[str, Any]:
        """Гигиена индекса: приём train-клипов через dedup-шлюз и аудит утечки probe-сплита."""
        cfg = self.cfg
        corpus = self._corpus("Audit")
        encoder = pixel_encoder(cfg.world.n_codes, cfg.index)
        probe = make_probe_split(cfg.world, cfg.pipeline.n_probe, self.seed, cfg.ttrl)
        eval_media = [media_from_clip(c, encoder) for c, _ in probe]
        index = IvfPqIndex(cfg.index)
        gate = IngestGate(index, eval_media, cfg.index)
        for clip, query, _ in corpus["train"]:
            key = build_keys(clip, query, [], encoder, cfg.index, source_id=clip.clip_id)
            gate.ingest(media_from_clip(clip, encoder), key)
        index.build()

        report = audit_leakage(list(gate.accepted.values()), eval_media, cfg.index)
        counts = dict(Counter(e["status"] for e in gate.log))
        path = self.store.write_json("audit.json", {**report.to_dict(), "ingest": counts, "ingest_log": gate.log})
        self.store.write_text("audit.txt", report.to_text())
        return {
            "ok": True,
            "stage": "audit",
            "report": path.name,
            "ingest": counts,
            "exact_overlaps": report.exact_overlaps,
            "near_duplicates": report.near_duplicates,
            "leak_rate": report.rate,
            "ci": [report.ci_low, report.ci_high],
            "message": f"Аудит: {report.confirmed}/{report.inspected} подтверждённых утечек.",
        }

    # -------------------------------------------------------------------------
    # METRICS
    # -------------------------------------------------------------------------

    def evaluate(self, policy: PolicyParams, items: Sequence[CorpusItem], zstats: Dict[str, ZStats],
                 tag: str) -> Tuple[Dict[str, Any], list, list, List[Trajectory]]:
        """Жадные траектории на dev: процессные метрики, VisFid против принятых траекторий учителя."""
        cfg = self.cfg
        encoder = self.step_encoder()
        records, chains = [], []
        trajs: List[Trajectory] = []
        for i, (clip, query, traces) in enumerate(items):
            traj = sample_trajectory(policy, clip, query, cfg.ttrl.max_steps, cfg.noise,
                                     make_rng(self.seed, "eval", tag, i), greedy=True)
            refs = [s.obs for t in traces if t.accepted for s in t.steps if s.decisive and s.obs.success]
            stats = zstats.get(query.kind) or ZStats(query.kind, 0.0, 1.0)
            records.append(process_record(traj, clip, encoder, stats, cfg.rcpr, visfid=visfid(traj, refs)))
            chains.append((tool_step_embeddings(traj, clip, encoder), validity_bits(traj, clip)))
            trajs.append(traj)
        summary = process_summary(records)
        summary["decisive_chain"] = float(np.mean([t.n_decisive for t in trajs])) if trajs else 0.0
        return summary, records, chains, trajs

    def _ttrl_view(self) -> Dict[str, Any]:
        """Всё по TTRL пересчитывается из последнего лога; кривая точности — из отчёта стадии."""
        cfg = self.cfg
        log = self.store.latest("ttrl_log.jsonl")
        if log is None:
            logger.warning("Metrics: no TTRL log, TTRL series are empty")
            return {"risk_coverage": [], "kl_series": [], "accuracy_series": [], "ttrl": {}}
        header, recs = self.store.read_stream(log, TTRL_SCHEMA)
        kl = [r["kl"] for r in recs]
        decisions = [Decision(r["consensus"]["margin"], len(r["consensus"]["conformal_set"]) == 1, r["correct"])
                     for r in recs]
        accepted = sum(1 for r in recs if r["accepted"])
        n = len(recs)
        ttrl = {"log": log.name, "variant": header.get("variant"), "steps": n, "accepted": accepted}
        if n:
            warmup = min(cfg.pid.warmup, n // 2) if header.get("variant") != "no_safety" else 0
            ttrl.update({
                "acceptance_rate": accepted / n,
                "abstention_rate": 1.0 - accepted / n,
                "kl_p50": float(np.percentile(kl, 50)),
                "kl_p95": float(np.percentile(kl, 95)),
                "corridor_fraction": corridor_fraction(kl, cfg.ttrl.corridor_min, cfg.ttrl.corridor_max, warmup),
            })
        report = self.store.latest("ttrl_report.json")
        accuracy = json.loads(report.read_text(encoding="utf-8"))["accuracy_series"] if report else []
        points = risk_coverage(decisions, RISK_DELTAS) if decisions else []
        return {"risk_coverage": [asdict(p) for p in points], "kl_series": kl,
                "accuracy_series": accuracy, "ttrl": ttrl}

    def metrics(self) -> Dict[str, Any]:
        cfg = self.cfg
        corpus = self._corpus("Metrics")
        ckpt_path = self._latest_of(("ttrl.npz", "rft.npz", "sft.npz"), "Metrics")
        policy = load_checkpoint(ckpt_path).policy
        zstats = self.read_zstats(self.store.require("zstats_steps.json", "Metrics"))
        summary, records, chains, trajs = self.evaluate(policy, corpus["dev"], zstats, "metrics")

        bars = {}
        for name, attr in BAR_FIELDS.items():
            values = [float(getattr(r, attr)) for r in records]
            lo, hi = bootstrap_ci(values, n_resamples=cfg.pipeline.bootstrap_resamples, seed=self.seed)
            bars[name] = {"value": summary[name], "ci_low": lo, "ci_high": hi}

        pooled = [E for E, _ in chains]
        try:
            pooled_stats = fit_zstats(pooled, "all")
        except ValueError:
            pooled_stats = ZStats("all", 0.0, 1.0)
        sensitivity = racpr_sensitivity(chains, pooled_stats, cfg.rcpr)

        # пары (жадная, сэмплированная) на одном клипе для чувствительности Sim_behav к γ
        pairs = []
        for i, ((clip, query, _), greedy) in enumerate(zip(corpus["dev"], trajs)):
            sampled = sample_trajectory(policy, clip, query, cfg.ttrl.max_steps, cfg.noise,
                                        make_rng(self.seed, "metrics-pair", i))
            pairs.append((greedy, sampled))
        behav = sim_behav_sensitivity(pairs, cfg.rcpr)

        report = {
            "checkpoint": ckpt_path.name,
            "process": summary,
            "bars": bars,
            "sensitivity": sensitivity,
            "sensitivity_max_deviation": max_deviation(sensitivity),
            "behav_sensitivity": behav,
            "behav_max_deviation": max_deviation(behav),
            **self._ttrl_view(),
        }
        path = self.store.write_json("metrics.json", report)
        plots = export_plots(self.store, report, (cfg.ttrl.corridor_min, cfg.ttrl.corridor_max))
        return {
            "ok": True,
            "stage": "metrics",
            "report": path.name,
            "plots": [p.name for p in plots],
            "process": summary,
            "ttrl": report["ttrl"],
            "message": f"Метрики посчитаны по {summary.get('n', 0)} dev-запросам ({ckpt_path.name}).",
        }

    # -------------------------------------------------------------------------
    # ABLATE
    # -------------------------------------------------------------------------

    def ablate(self) -> Dict[str, Any]:
        """Матрица вариантов награды CC-RFT из одного SFT-чекпоинта при одинаковом бюджете обновлений."""
        ckpt = load_checkpoint(self.store.require("sft.npz", "Ablate"))
        corpus = self._corpus("Ablate")
        zstats = self.read_zstats(self.store.require("zstats_steps.json", "Ablate"))
        rows = []
        for variant in RFT_VARIANTS:
            _, result = self._train_rft(ckpt, corpus, variant)
            summary, _, _, _ = self.evaluate(result.params, corpus["dev"], zstats, variant)
            kl = [r["kl"] for r in result.records]
            rows.append({"variant": variant, **summary, "kl_mean": float(np.mean(kl)) if kl else 0.0})
            logger.info(f"Ablate: {variant} acc={summary.get('accuracy', 0):.3f} "
                        f"racpr={summary.get('racpr', 0):.3f} chain={summary['decisive_chain']:.2f}")
        path = self.store.write_json("ablation.json", {"variants": rows})
        return {"ok": True, "stage": "ablate", "report": path.name, "variants": rows,
                "message": f"Абляция: {len(rows)} вариантов."}

    # -------------------------------------------------------------------------
    # ПРОГОН ЦЕЛИКОМ
    # -------------------------------------------------------------------------

    def run_stage(self, stage: str) -> Dict[str, Any]:
        handlers = {
            "generate": self.generate,
            "sft": self.sft,
            "rft": self.rft,
            "ttrl": self.ttrl,
            "audit": self.audit,
            "metrics": self.metrics,
            "ablate": self.ablate,
        }
        if stage not in handlers:
            raise ValueError(f"Router: неизвестная стадия {stage!r}")
        return handlers[stage]()

    def run_pipeline(self) -> Dict[str, Any]:
        """Стадии из конфига по порядку; итоговый report.json со временем каждой стадии."""
        started = time.perf_counter()
        stages: Dict[str, Any] = {}
        for stage in self.cfg.pipeline.stages:
            t0 = time.perf_counter()
            logger.info(f"Pipeline: {stage} started ({self.store.run_id})")
            result = self.run_stage(stage)
            result["wall_time"] = round(time.perf_counter() - t0, 3)
            stages[stage] = result
        metrics = stages.get("metrics", {})
        report = {
            **self._meta(),
            "stages": stages,
            "table": {**metrics.get("process", {}), **metrics.get("ttrl", {})},
            "replay_log": stages.get("ttrl", {}).get("log"),
            "wall_time": round(time.perf_counter() - started, 3),
        }
        path = self.store.write_json("report.json", report)
        return {"ok": True, "stage": "run", "report": path.name, "run_dir": str(self.store.root),
                "stages": list(stages), "table": report["table"],
                "message": f"Прогон {self.store.run_id} завершён."}


# -----------------------------------------------------------------------------
# ЛОКАЛЬНЫЙ ТЕСТ (чтобы проверить, что Router реально живой)
# Запускается вот так:
#   python ./src/router/main_router.py
# -----------------------------------------------------------------------------

if __name__ == "__main__":
    from config import run_config_from_dict

    cfg = run_config_from_dict({
        "pipeline": {"n_train": 12, "n_dev": 8, "n_stream": 6, "n_probe": 6, "out_dir": "runs/_demo"},
        "sft": {"epochs": 2},
        "rft": {"updates": 2, "group_size": 4},
        "dynamics": {"hidden": [16], "epochs": 2, "embed_hidden": 16, "embed_dim": 8},
    })
    router = PixelSoulRouter(cfg)
    for stage in ("generate", "sft", "rft", "ttrl", "metrics"):
        print(f"🔄 {stage} ->", router.run_stage(stage)["message"])
