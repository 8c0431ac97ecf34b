"""Command-line entry point: ``somno <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import threading
from pathlib import Path

import numpy as np

from . import checkpoint, experience_model as em, intake, session, stage_model as sm, stimulus, stream_io
from .config import ConfigError, load_config
from .resources import read_text
from .signal_core import MONTAGE_64, Epoch

log = logging.getLogger("somno")

SYNTH_STAGE_LR = 1e-3
HOLDOUT_FRACTION = 0.2


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_stage_npz(path, seed):
    """``epochs``: (n, 3000) at 100 Hz; ``labels``: raw scorer strings."""
    with np.load(path, allow_pickle=False) as npz:
        epochs, raw = npz["epochs"], npz["labels"]
    pairs = []
    for row, label in zip(epochs, raw):
        mapped = sm.map_external_label(str(label))
        if mapped is not None:
            pairs.append((Epoch(row, 0), mapped))
    order = np.random.default_rng(seed).permutation(len(pairs))
    return [pairs[i] for i in order]


def cmd_train_stage(args, cfg) -> int:
    if args.synthetic:
        data = stream_io.synthetic_stage_dataset(args.n_per_class, seed=cfg.seed)
        lr = args.lr if args.lr is not None else SYNTH_STAGE_LR
    else:
        data = _load_stage_npz(args.data, cfg.seed)
        lr = args.lr if args.lr is not None else sm.DEFAULT_LR
    n_test = int(round(len(data) * HOLDOUT_FRACTION))
    train, test = data[:len(data) - n_test], data[len(data) - n_test:]
    config = sm.TrainConfig(hidden=args.hidden, epochs=args.epochs, lr=lr, seed=cfg.seed)
    net, history = sm.train(train, config)
    checkpoint.save(net, args.out, seed=cfg.seed, lr=lr, epochs=args.epochs,
                    batch_size=config.batch_size, weight_decay=config.weight_decay)
    print(f"training loss {history.initial_loss:.4f} -> {history.loss[-1]:.4f}")
    if test:
        x = sm.band_powers(np.stack([e.samples for e, _ in test]))
        print(f"held-out accuracy {sm.accuracy_of(net, x, [lab for _, lab in test]):.4f} on {len(test)} epochs")
    print(f"checkpoint {args.out} sha256:{_sha256(args.out)}")
    return 0


def _load_corpus(args, cfg):
    if getattr(args, "synthetic", False):
        return em.synthetic_experience_corpus(seed=cfg.seed)
    return em.corpus_from_json(Path(args.corpus).read_text(encoding="utf-8"))


def cmd_train_experience(args, cfg) -> int:
    corpus = _load_corpus(args, cfg)
    config = em.experience_train_config(seed=cfg.seed)
    net, history = em.train_experience(corpus, config)
    checkpoint.save(net, args.out, seed=cfg.seed, lr=config.lr, epochs=config.epochs)
    print(f"training loss {history.initial_loss:.4f} -> {history.loss[-1]:.4f}, "
          f"training accuracy {history.accuracy[-1]:.4f}")
    print(f"checkpoint {args.out} sha256:{_sha256(args.out)}")
    return 0


def cmd_eval_loso(args, cfg) -> int:
    if args.table:
        report = em.EvalReport.from_table(Path(args.table).read_text(encoding="utf-8"))
    elif args.reported:
        report = em.EvalReport.from_table(read_text("published_loso_results.tsv"))
    else:
        report = em.loso_evaluate(_load_corpus(args, cfg), em.experience_train_config(seed=cfg.seed))
    print(report.to_table(), end="")
    if args.out_table:
        Path(args.out_table).write_text(report.to_table(), encoding="utf-8")
    if args.out_json:
        Path(args.out_json).write_text(report.to_json(), encoding="utf-8")
    return 0


def _chunk_source(args, cfg):
    """Returns (channels, reference, rate, chunk iterator)."""
    if args.file:
        header = stream_io.read_replay_header(args.file)
        return header.channels, header.reference, header.rate_hz, stream_io.replay_file(args.file, args.realtime)
    if args.script:
        script = stream_io.StageScript.parse(Path(args.script).read_text(encoding="utf-8"), cfg.seed)
        return MONTAGE_64, "FCz", 1000.0, stream_io.synth_eeg(script)
    host, _, port = args.connect.rpartition(":")
    header, chunks = stream_io.receive(host or cfg.host, int(port))
    return header.channels, header.reference, header.rate_hz, chunks


def _gain(cfg) -> float:
    if cfg.target_db_spl is not None:
        return stimulus.db_target_to_gain(cfg.target_db_spl, cfg.calibration_db_spl)
    return cfg.gain_dbfs


def cmd_run_session(args, cfg) -> int:
    if not cfg.stage_checkpoint or not cfg.experience_checkpoint:
        raise ConfigError("stage and experience checkpoints are required (--stage-ckpt/--exp-ckpt or config)")
    models = session.SessionModels.from_checkpoints(cfg.stage_checkpoint, cfg.experience_checkpoint)
    if args.force_stimulus:
        kind = stimulus.StimulusKind.parse(args.force_stimulus)
        policy = intake.parse_policy(f"DEFAULT {kind.value}\n", f"forced:{kind.value}")
    else:
        policy = intake.load_policy(cfg.policy)
    profile = intake.load_profile(args.intake)
    config = session.SessionConfig(stop_k=cfg.stop_k, rearm=cfg.rearm, gain_dbfs=_gain(cfg),
                                   stim_seed=cfg.stim_seed, rain_file=cfg.rain_file)
    channels, reference, rate, chunks = _chunk_source(args, cfg)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        report, controller, _ = session.run_session(
            stream_io.bounded_stream(chunks), channels, reference, rate, profile, policy, models,
            config, log_sink=log_fh)
    finally:
        if log_fh:
            log_fh.close()
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    if not args.log:
        print("\n".join(controller.log.lines))
    print(text, end="")
    print(f"report sha256:{hashlib.sha256(text.encode()).hexdigest()}")
    return 0


def cmd_synth_stim(args, cfg) -> int:
    buf = stimulus.synth(args.kind, args.duration, args.seed, args.gain,
                         rain_file=args.rain_file or cfg.rain_file)
    stimulus.write_wav(buf, args.out)
    print(f"{buf.kind.value} {buf.duration_s:.3f} s at {args.gain:.1f} dBFS ({buf.source}) -> {args.out} "
          f"sha256:{_sha256(args.out)}")
    return 0


def cmd_score_intake(args, cfg) -> int:
    profile = intake.load_profile(args.answers)
    policy = intake.load_policy(args.policy or cfg.policy)
    p = profile.as_dict()
    print(f"PSQI global {p['psqi']['global']}  components "
          + " ".join(str(v) for k, v in p["psqi"].items() if k != "global"))
    print("BRUMS " + " ".join(f"{k}={v}" for k, v in p["brums"].items()))
    pvt = p["pvt"]
    print(f"PVT mean RT {pvt['mean_rt']:.1f} ms, lapses {pvt['lapses']}, "
          f"mean 1/RT {pvt['mean_reciprocal']:.3f} /s, false starts {pvt['false_starts']}")
    print(f"stimulus {intake.select_stimulus(profile, policy).value}  (policy {policy.stamp})")
    return 0


def cmd_stream_serve(args, cfg) -> int:
    header = stream_io.read_replay_header(args.file)
    chunks = stream_io.replay_file(args.file, realtime=args.realtime)
    sent = _serve(header, chunks, args, cfg)
    print(f"sent {sent} chunks")
    return 0


def cmd_stream_synth(args, cfg) -> int:
    script = stream_io.StageScript.parse(Path(args.script).read_text(encoding="utf-8"), cfg.seed)
    header = stream_io.StreamHeader(1000.0, MONTAGE_64, "FCz", int(script.duration_s * 1000))
    chunks = stream_io.synth_eeg(script)
    if args.realtime:
        chunks = stream_io.paced(chunks, stream_io.CHUNK_SECONDS)
    sent = _serve(header, chunks, args, cfg)
    print(f"sent {sent} chunks")
    return 0


def _serve(header, chunks, args, cfg):
    ready = threading.Event()
    bound = []

    def announce():
        ready.wait()
        print(f"serving on {cfg.host}:{bound[0]}, waiting for one client", flush=True)

    threading.Thread(target=announce, daemon=True).start()
    return stream_io.serve(header, stream_io.bounded_stream(chunks), cfg.port, cfg.host, ready, bound)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="somno", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat key = value config file (flags override it)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train-stage", help="train the epoch stage classifier")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", action="store_true", help="use the synthetic band-signature corpus")
    src.add_argument("--data", help=".npz with 'epochs' (n, 3000) and raw 'labels'")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--lr", type=float)
    p.add_argument("--n-per-class", type=int, default=250)
    p.set_defaults(func=cmd_train_stage)

    p = sub.add_parser("train-experience", help="train the sleep-experience layer")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", action="store_true")
    src.add_argument("--corpus", help="JSON corpus of subjects")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_experience)

    p = sub.add_parser("eval-loso", help="leave-one-subject-out evaluation")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", action="store_true")
    src.add_argument("--corpus", help="JSON corpus of subjects")
    src.add_argument("--table", help="per-subject 'subject acc f1' rows to average")
    src.add_argument("--reported", action="store_true", help="average the bundled published per-subject results")
    p.add_argument("--out-table")
    p.add_argument("--out-json")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval_loso)

    p = sub.add_parser("run-session", help="run one closed-loop session")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--file", help="replay file")
    src.add_argument("--script", help="stage script for synthetic EEG")
    src.add_argument("--connect", help="HOST:PORT of a stream server")
    p.add_argument("--realtime", action="store_true")
    p.add_argument("--intake", required=True, help="intake answers file")
    p.add_argument("--policy")
    p.add_argument("--force-stimulus", help="bypass the policy with this stimulus")
    p.add_argument("--stage-ckpt", dest="stage_checkpoint")
    p.add_argument("--exp-ckpt", dest="experience_checkpoint")
    p.add_argument("--stop-k", type=int)
    p.add_argument("--gain", dest="gain_dbfs", type=float)
    p.add_argument("--target-db", dest="target_db_spl", type=float)
    p.add_argument("--calibration", dest="calibration_db_spl", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--report")
    p.add_argument("--log")
    p.set_defaults(func=cmd_run_session)

    def add_stim_args(p):
        p.add_argument("--kind", required=True, type=_kind)
        p.add_argument("--duration", required=True, type=float)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--gain", type=float, default=0.0)
        p.add_argument("--out", required=True)
        p.add_argument("--rain-file")
        p.set_defaults(func=cmd_synth_stim)

    add_stim_args(sub.add_parser("synth-stim", help="render a stimulus to WAV"))
    stim = sub.add_parser("stim", help="stimulus tools").add_subparsers(dest="stim_command", required=True)
    add_stim_args(stim.add_parser("synth", help="render a stimulus to WAV"))

    p = sub.add_parser("score-intake", help="score PSQI/BRUMS/PVT answers and select a stimulus")
    p.add_argument("answers")
    p.add_argument("--policy")
    p.set_defaults(func=cmd_score_intake)

    stream = sub.add_parser("stream", help="serve EEG over TCP").add_subparsers(dest="stream_command", required=True)
    p = stream.add_parser("serve", help="serve a replay file")
    p.add_argument("--file", required=True)
    p.add_argument("--port", type=int)
    p.add_argument("--host")
    p.add_argument("--realtime", action="store_true")
    p.set_defaults(func=cmd_stream_serve)
    p = stream.add_parser("synth", help="serve synthetic EEG from a stage script")
    p.add_argument("--script", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--port", type=int)
    p.add_argument("--host")
    p.add_argument("--realtime", action="store_true")
    p.set_defaults(func=cmd_stream_synth)
    return parser


def _kind(text):
    try:
        return stimulus.StimulusKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


_CONFIG_KEYS = ("stage_checkpoint", "experience_checkpoint", "policy", "stop_k", "seed", "port", "host",
                "gain_dbfs", "target_db_spl", "calibration_db_spl")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, **{k: getattr(args, k) for k in _CONFIG_KEYS if hasattr(args, k)})
    except (ConfigError, OSError) as exc:
        parser.error(str(exc))
    try:
        return args.func(args, cfg)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # reported, not traced, at the CLI boundary
        if args.verbose:
            log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
