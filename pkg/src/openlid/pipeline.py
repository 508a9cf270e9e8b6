"""Pipeline steps behind the command-line interface.

All steps operate on a work directory:

    manifest.tsv, prepare.json, registry.json   (prepare)
    features/<code>/<stem>.<segment>.lidf        (prepare)
    model.lidm, model_best.lidm, train_log.jsonl (train)
    ensemble.lide, backend.json                  (fit-backend)
    enrolled/<code>/...                          (enroll)

Every artifact carries the full configuration that produced it, and no
artifact records wall-clock time, so reruns are byte-identical.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import os
from collections import Counter, defaultdict
from typing import Sequence

import numpy as np

from .backend.ensemble import (
    PldaEnsemble,
    ResidentCounter,
    _vote,
    classify_batch,
    enroll_language,
    ensemble_bytes,
    fit_ensemble,
    load_ensemble,
    stratified_batches,
)
from .backend.representation import extract_representations
from .config import PipelineConfig
from .corpus.audio import segment_utterance
from .corpus.naming import Sex, UtteranceMeta, parse_filename
from .corpus.registry import LanguageRegistry
from .corpus.split import SegmentRef, SplitPlan, make_split
from .errors import (
    ConfigError,
    DecodeError,
    DuplicateCode,
    EmptyInput,
    IoError,
    LidError,
    MalformedName,
    RegistryMismatch,
)
from .features import FeatureMatrix, MfccConfig, extract_features, feature_bytes, load_features
from .metrics import det_curve, in_set_report, out_of_set_report, total_accuracy_sweep, write_report_bundle
from .nn.io import load_model, model_bytes
from .nn.tdnn import TdnnModel, average_posterior, forward
from .nn.train import predict_posteriors, train
from .openset import ThresholdPolicy, decide, utterance_posterior

log = logging.getLogger("openlid")

MANIFEST = "manifest.tsv"
PREPARE_INFO = "prepare.json"
REGISTRY = "registry.json"
FEATURE_DIR = "features"
ENROLL_DIR = "enrolled"
MODEL_FINAL = "model.lidm"
MODEL_BEST = "model_best.lidm"
TRAIN_LOG = "train_log.jsonl"
ENSEMBLE = "ensemble.lide"
BACKEND_INFO = "backend.json"
LOCK = ".openlid.lock"


# --- file plumbing -----------------------------------------------------------

@contextlib.contextmanager
def locked(directory: str | os.PathLike):
    """Hold an exclusive lock file in ``directory`` for the duration."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, LOCK)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise IoError(f"{directory} is locked by another run (delete {path} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(OSError):
            os.remove(path)


def write_if_changed(path: str | os.PathLike, data: bytes) -> bool:
    """Write ``data`` unless the file already holds exactly these bytes."""
    try:
        with open(path, "rb") as f:
            if f.read() == data:
                return False
    except FileNotFoundError:
        pass
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return True


def write_new(path: str | os.PathLike, data: bytes) -> None:
    """Create ``path``; refuses to replace an existing file."""
    try:
        with open(path, "xb") as f:
            f.write(data)
    except FileExistsError:
        raise IoError(f"{path} already exists; choose another output path") from None
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise IoError(f"{path} not found; run the earlier pipeline steps first") from None


def feature_relpath(ref: SegmentRef) -> str:
    stem = os.path.splitext(os.path.basename(ref.audio_path))[0]
    return "/".join([FEATURE_DIR, ref.language_code, f"{stem}.{ref.segment_index:03d}.lidf"])


# --- prepare -------------------------------------------------------------------

def scan_dataset(root: str, registry: LanguageRegistry):
    """Registered utterances under ``root``, plus orphan transcripts and skipped codes.

    Paths in the returned metadata are relative to ``root``.
    """
    metas, orphans, skipped = [], [], set()
    for lang in sorted(os.listdir(root)):
        lang_dir = os.path.join(root, lang)
        if not os.path.isdir(lang_dir):
            continue
        names = sorted(os.listdir(lang_dir))
        wavs = {os.path.splitext(n)[0] for n in names if n.endswith(".wav")}
        for name in names:
            stem, ext = os.path.splitext(name)
            if ext == ".txt" and stem not in wavs:
                orphans.append(f"{lang}/{name}")
            if ext != ".wav":
                continue
            meta = parse_filename(os.path.join(lang_dir, name))
            if meta.language_code != lang:
                raise MalformedName(f"{lang}/{name}: language code does not match its folder")
            if meta.language_code not in registry:
                skipped.add(meta.language_code)
                continue
            rel = f"{lang}/{name}"
            metas.append(dataclasses.replace(
                meta, audio_path=rel,
                transcript_path=f"{lang}/{stem}.txt" if meta.transcript_path else None))
    return metas, orphans, sorted(skipped)


def cmd_prepare(cfg: PipelineConfig, work: str) -> dict:
    """Segment and featurize the dataset, then write the split manifest.

    Feature files and the manifest are only rewritten when their bytes
    change, so a second identical run touches nothing.
    """
    root = cfg.require_dataset_root()
    registry = cfg.language_registry()
    mfcc = cfg.mfcc_config()
    with locked(work):
        metas, orphans, skipped = scan_dataset(root, registry)
        if orphans:
            log.warning("transcripts without audio", extra={"record": {"orphans": orphans}})
        if skipped:
            log.info("languages outside the registry skipped", extra={"record": {"codes": skipped}})
        refs, written = [], 0
        for meta in metas:
            try:
                segments = segment_utterance(os.path.join(root, meta.audio_path), meta,
                                             cfg.segment_s, cfg.rate)
                for seg in segments:
                    ref = SegmentRef.of(seg)
                    data = feature_bytes(extract_features(seg, mfcc))
                    written += write_if_changed(os.path.join(work, feature_relpath(ref)), data)
                    refs.append(ref)
            except DecodeError as exc:
                raise DecodeError(f"{meta.audio_path}: {exc}") from exc
        plan = make_split(refs, registry, cfg.seed)
        counts: dict = defaultdict(Counter)
        for tag, ref in plan.items():
            counts[ref.language_code][tag] += 1
        info = {
            "config": cfg.to_dict(),
            "n_utterances": len(metas),
            "n_segments": len(refs),
            "split_counts": {code: dict(sorted(c.items())) for code, c in sorted(counts.items())},
            "shared_speakers": plan.shared_speakers,
            "orphan_transcripts": orphans,
            "skipped_languages": skipped,
        }
        written += write_if_changed(os.path.join(work, MANIFEST), plan.to_manifest().encode("utf-8"))
        written += write_if_changed(os.path.join(work, PREPARE_INFO), _json_bytes(info))
        written += write_if_changed(os.path.join(work, REGISTRY), _json_bytes(registry.to_dict()))
    summary = {"segments": len(refs), "files_written": written,
               "languages": len(counts), "orphans": len(orphans)}
    log.info("prepare finished", extra={"record": summary})
    return summary


# --- workspace access ----------------------------------------------------------

class Workspace:
    def __init__(self, root: str):
        self.root = root

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    def plan(self) -> SplitPlan:
        try:
            with open(self.path(MANIFEST), encoding="utf-8") as f:
                return SplitPlan.from_manifest(f.read())
        except FileNotFoundError:
            raise IoError(f"no {MANIFEST} in {self.root}; run prepare first") from None

    def prepared_registry(self) -> LanguageRegistry:
        return LanguageRegistry.from_dict(_read_json(self.path(REGISTRY)))

    def load(self, relpaths: Sequence[str]) -> np.ndarray:
        if not relpaths:
            return np.zeros((0, 0, 0), dtype=np.float32)
        return np.stack([load_features(self.path(p)).frames for p in relpaths])

    def features(self, refs: Sequence[SegmentRef]) -> np.ndarray:
        return self.load([feature_relpath(r) for r in refs])


def _check_registry(cfg: PipelineConfig, ws: Workspace) -> LanguageRegistry:
    registry = cfg.language_registry()
    if ws.prepared_registry().to_dict() != registry.to_dict():
        raise ConfigError("registry differs from the one used by prepare; rerun prepare")
    return registry


# --- train ---------------------------------------------------------------------

def _labelled(ws: Workspace, refs, registry: LanguageRegistry):
    x = ws.features(refs)
    y = np.array([registry.index_of(r.language_code) for r in refs], dtype=np.int64)
    return x, y


def cmd_train(cfg: PipelineConfig, work: str) -> list[dict]:
    """Train the TDNN on the prepared split.

    Writes one JSON line per epoch, the checkpoint with the best validation
    accuracy (earliest on ties) and the final model.
    """
    ws = Workspace(work)
    registry = _check_registry(cfg, ws)
    plan = ws.plan()
    x_tr, y_tr = _labelled(ws, plan.tdnn_train, registry)
    x_va, y_va = _labelled(ws, plan.tdnn_val, registry)
    if len(x_tr) == 0:
        raise EmptyInput("no training segments in the manifest")
    tcfg = cfg.train_config()
    model = TdnnModel.init(cfg.tdnn_config(), seed=cfg.seed, registry_hash=registry.fingerprint())
    provenance = {"config": cfg.to_dict(), "registry": registry.to_dict()}
    best = {"score": -1.0}
    with locked(work):
        log_path = ws.path(TRAIN_LOG)
        with open(log_path, "w", encoding="utf-8") as log_file:
            def on_epoch(record, m):
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
                log.info("epoch", extra={"record": record})
                score = record.get("val_accuracy", -record["train_loss"])
                if score > best["score"]:
                    best["score"] = score
                    snap = m.copy()
                    snap.extra = {**provenance, "epoch": record["epoch"], "checkpoint": "best"}
                    write_if_changed(ws.path(MODEL_BEST), model_bytes(snap))

            history = train(model, x_tr, y_tr, tcfg, x_va if len(x_va) else None,
                            y_va if len(y_va) else None, on_epoch=on_epoch)
        model.extra = {**provenance, "epoch": tcfg.epochs, "checkpoint": "final"}
        write_if_changed(ws.path(MODEL_FINAL), model_bytes(model))
    return history


# --- back-end ------------------------------------------------------------------

class RepresentationLoader:
    """Vector ids are feature-file paths relative to the work directory."""

    def __init__(self, ws: Workspace, model: TdnnModel, pooling: str):
        self.ws = ws
        self.model = model
        self.pooling = pooling

    def __call__(self, ids: Sequence[str]) -> np.ndarray:
        out = []
        for i in range(0, len(ids), 64):
            out.append(extract_representations(self.model, self.ws.load(ids[i:i + 64]), self.pooling))
        return np.concatenate(out, axis=0)


def _load_model(path: str, registry: LanguageRegistry | None = None) -> TdnnModel:
    return load_model(path, registry.fingerprint() if registry is not None else None)


def cmd_fit_backend(cfg: PipelineConfig, work: str, model_path: str | None = None) -> PldaEnsemble:
    ws = Workspace(work)
    registry = _check_registry(cfg, ws)
    model = _load_model(model_path or ws.path(MODEL_FINAL), registry)
    bcfg = cfg.backend_config()
    refs = ws.plan().backend_fit
    if not refs:
        raise EmptyInput("no back-end fitting segments in the manifest")
    ids = [feature_relpath(r) for r in refs]
    labels = [r.language_code for r in refs]
    batches = stratified_batches(ids, labels, bcfg.batch_segments, seed=cfg.seed)
    counter = ResidentCounter(budget=bcfg.batch_segments)
    meta = {**bcfg.to_dict(), "pipeline": cfg.to_dict(), "registry": registry.to_dict(),
            "model_fingerprint": model.fingerprint()}
    with locked(work):
        ensemble = fit_ensemble(batches, RepresentationLoader(ws, model, bcfg.pooling), k=bcfg.k,
                                novelty_threshold=bcfg.novelty_threshold, shrinkage=bcfg.shrinkage,
                                counter=counter, classes=sorted(set(labels)), config=meta)
        write_if_changed(ws.path(ENSEMBLE), ensemble_bytes(ensemble))
        info = {"config": cfg.to_dict(), "members": len(ensemble.members),
                "batch_sizes": [len(b) for b in batches], "peak_resident_vectors": counter.peak,
                "labels": ensemble.labels}
        write_if_changed(ws.path(BACKEND_INFO), _json_bytes(info))
    log.info("back-end fitted", extra={"record": {k: info[k] for k in ("members", "peak_resident_vectors")}})
    return ensemble


def _check_pair(model: TdnnModel, ensemble: PldaEnsemble) -> None:
    want = ensemble.config.get("model_fingerprint")
    if want is not None and want != model.fingerprint():
        raise RegistryMismatch("the ensemble was fitted on representations from a different model")


# --- identify ------------------------------------------------------------------

def _placeholder_meta(path: str) -> UtteranceMeta:
    return UtteranceMeta("und", "unknown", Sex.UNKNOWN, None, 0, path, None)


def _model_settings(model: TdnnModel) -> tuple[float, int, MfccConfig]:
    cfg = model.extra.get("config", {})
    pc = PipelineConfig.from_dict(cfg) if cfg else PipelineConfig()
    return pc.segment_s, pc.rate, pc.mfcc_config()


def featurize_file(path: str, model: TdnnModel) -> list[FeatureMatrix]:
    segment_s, rate, mfcc = _model_settings(model)
    try:
        meta = parse_filename(path)
    except MalformedName:
        meta = _placeholder_meta(path)
    return [extract_features(s, mfcc) for s in segment_utterance(path, meta, segment_s, rate)]


def cmd_identify(audio_path: str, model_path: str, ensemble_path: str, tau: float | None = None) -> list[dict]:
    """One decision record per segment followed by an utterance summary.

    Accepted segments report the in-set code; rejected ones carry the
    ensemble label, its confidence and the novelty flag.
    """
    model = _load_model(model_path)
    ensemble = load_ensemble(ensemble_path)
    _check_pair(model, ensemble)
    registry = LanguageRegistry.from_dict(model.extra["registry"])
    model.check_registry(registry.fingerprint())
    if tau is None:
        tau = model.extra.get("config", {}).get("tau", ThresholdPolicy().tau)
    policy = ThresholdPolicy(tau)
    feats = featurize_file(audio_path, model)
    records = []
    if not feats:
        records.append({"path": audio_path, "summary": True, "segments": 0, "accepted": None,
                        "prediction": None, "confidence": None, "backend": None})
        return records
    x = np.stack([f.frames for f in feats])
    posts = [average_posterior(forward(model, xi, "eval")["posterior_frames"]) for xi in x]
    pooling = ensemble.config.get("pooling", "concat")
    backend = classify_batch(ensemble, extract_representations(model, x, pooling))
    for i, (p, b) in enumerate(zip(posts, backend)):
        d = decide(p, policy, registry)
        rec = d.to_record(audio_path, i)
        rec["backend"] = None if d.accepted else _backend_record(b)
        records.append(rec)
    d = decide(utterance_posterior(posts), policy, registry)
    summary = d.to_record(audio_path, None)
    summary.update(summary=True, segments=len(feats))
    if d.accepted:
        summary["backend"] = None
    else:
        label, conf, votes = _vote([b.label for b in backend], [b.confidence for b in backend])
        summary["backend"] = {"label": label, "confidence": conf,
                              "novel": conf < ensemble.novelty_threshold, "votes": votes,
                              "members": len(backend)}
    records.append(summary)
    return records


def _backend_record(b) -> dict:
    return {"label": b.label, "confidence": b.confidence, "novel": b.novel,
            "votes": b.votes, "members": b.n_members}


# --- enroll --------------------------------------------------------------------

def enrolled_path(ensemble_path: str, code: str) -> str:
    base, ext = os.path.splitext(ensemble_path)
    return f"{base}+{code}{ext or '.lide'}"


def cmd_enroll(work: str, code: str, audio_dir: str, model_path: str, ensemble_path: str,
               out_path: str | None = None) -> tuple[PldaEnsemble, LanguageRegistry, str]:
    """Refit the ensemble with a new language; writes a new ensemble file.

    The input ensemble is never modified. Features of the new examples are
    kept under ``enrolled/<code>`` so later enrollments can refit on them.
    """
    ws = Workspace(work)
    model = _load_model(model_path)
    ensemble = load_ensemble(ensemble_path)
    _check_pair(model, ensemble)
    registry = LanguageRegistry.from_dict(ensemble.config["registry"])
    out_path = out_path or enrolled_path(ensemble_path, code)
    if os.path.exists(out_path):
        raise IoError(f"{out_path} already exists; choose another output path")
    if code in registry:
        raise DuplicateCode(f"language {code!r} is already registered")
    try:
        names = sorted(n for n in os.listdir(audio_dir) if n.endswith(".wav"))
    except OSError as exc:
        raise IoError(f"cannot list {audio_dir}: {exc}") from exc
    ids = []
    with locked(work):
        for name in names:
            path = os.path.join(audio_dir, name)
            try:
                feats = featurize_file(path, model)
            except DecodeError as exc:
                raise DecodeError(f"{path}: {exc}") from exc
            stem = os.path.splitext(name)[0]
            for i, fm in enumerate(feats):
                rel = "/".join([ENROLL_DIR, code, f"{stem}.{i:03d}.lidf"])
                write_if_changed(ws.path(rel), feature_bytes(fm))
                ids.append(rel)
        counter = ResidentCounter()
        new, new_registry = enroll_language(
            ensemble, code, ids, RepresentationLoader(ws, model, ensemble.config.get("pooling", "concat")),
            registry, min_enroll=int(ensemble.config.get("min_enroll", 50)), counter=counter,
            fingerprint=model.fingerprint)
        new.config["registry"] = new_registry.to_dict()
        write_new(out_path, ensemble_bytes(new))
        write_new(os.path.splitext(out_path)[0] + ".registry.json", _json_bytes(new_registry.to_dict()))
    log.info("enrolled", extra={"record": {"code": code, "segments": len(ids), "output": out_path,
                                           "peak_resident_vectors": counter.peak}})
    return new, new_registry, out_path


# --- evaluate ------------------------------------------------------------------

def cmd_evaluate(cfg: PipelineConfig, work: str, model_path: str | None = None,
                 ensemble_path: str | None = None, out_dir: str | None = None) -> dict:
    """Metrics over the test split: in-set, out-of-set, DET/EER and the sweep."""
    ws = Workspace(work)
    registry = _check_registry(cfg, ws)
    model = _load_model(model_path or ws.path(MODEL_FINAL), registry)
    ensemble = load_ensemble(ensemble_path or ws.path(ENSEMBLE))
    _check_pair(model, ensemble)
    test = ws.plan().test
    ins = [r for r in test if registry.is_in_set(r.language_code)]
    outs = [r for r in test if not registry.is_in_set(r.language_code)]
    if not ins:
        raise EmptyInput("no in-set test segments")
    if not outs:
        raise EmptyInput("no out-of-set test segments")

    p_in = predict_posteriors(model, ws.features(ins))
    p_out = predict_posteriors(model, ws.features(outs))
    truth_in = np.array([registry.index_of(r.language_code) for r in ins])
    pooling = ensemble.config.get("pooling", "concat")
    loader = RepresentationLoader(ws, model, pooling)
    out_ids = [feature_relpath(r) for r in outs]
    decisions = []
    for i in range(0, len(out_ids), 256):
        decisions += classify_batch(ensemble, loader(out_ids[i:i + 256]))
    truth_out = [r.language_code for r in outs]
    pred_out = [d.label for d in decisions]

    in_rep = in_set_report(p_in, truth_in, registry.in_set, tau=cfg.tau)
    labels_out = sorted(set(truth_out) | set(pred_out))
    out_rep = out_of_set_report(truth_out, pred_out, labels_out)
    conf_in, conf_out = p_in.max(axis=1), p_out.max(axis=1)
    det = det_curve(conf_in, conf_out)
    sweep = total_accuracy_sweep(
        np.concatenate([conf_in, conf_out]),
        np.r_[np.ones(len(ins), bool), np.zeros(len(outs), bool)],
        np.r_[p_in.argmax(axis=1) == truth_in, np.zeros(len(outs), bool)],
        np.r_[np.zeros(len(ins), bool), np.array(pred_out) == np.array(truth_out)],
    )
    utt = _utterance_accuracy(ins, p_in, truth_in)
    report = {
        "config": cfg.to_dict(),
        "registry": registry.to_dict(),
        "tau": cfg.tau,
        "n_in_set": len(ins),
        "n_out_of_set": len(outs),
        "in_set": in_rep,
        "in_set_utterance_accuracy": utt,
        "out_of_set": out_rep,
        "novel_fraction": float(np.mean([d.novel for d in decisions])),
        "eer": det.eer,
        "eer_threshold": det.eer_threshold,
        "argmax_threshold": sweep.argmax_threshold,
        "max_total_accuracy": sweep.max_accuracy,
        "sweep_endpoints": sweep.endpoints,
    }
    write_report_bundle(out_dir or ws.path("report"), report, det, sweep)
    log.info("evaluation", extra={"record": {
        "in_set_accuracy": in_rep["accuracy"], "out_of_set_accuracy": out_rep["accuracy"],
        "eer": det.eer, "argmax_threshold": sweep.argmax_threshold}})
    return report


def _utterance_accuracy(refs, posteriors, truth) -> float:
    groups: dict[str, list[int]] = defaultdict(list)
    for i, r in enumerate(refs):
        groups[r.audio_path].append(i)
    hits = [int(np.argmax(utterance_posterior(posteriors[idx]))) == truth[idx[0]] for idx in groups.values()]
    return float(np.mean(hits))


def error_record(exc: LidError) -> dict:
    return {"error": type(exc).__name__, "exit_code": exc.exit_code, "message": str(exc)}
