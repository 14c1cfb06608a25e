"""Command-line surface.

Every command validates its configuration up front, runs deterministically
for a fixed seed in single-worker mode, and prints one machine-readable
`key=value ...` summary line on success. Exit codes: 0 success, 1 usage
error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audio import load_wav, logmel, read_activity, save_wav, write_activity
from .config import apply_overrides, default_config, parse_config_file, validate
from .diarization import (der_components, diarize, jer, prepare_windows,
                          prepare_windows_external, read_window_rttm, rttm_read,
                          rttm_write, stitch, ahc_centroid, turns_from_activity,
                          write_score_csv)
from .errors import DataError, GseError, NumericError, UsageError
from .mixture import (by_speaker, load_corpus, make_one_vs_many, overlap_ratio,
                      read_manifest, split_corpus, synth_conversation,
                      synth_corpus, write_corpus, write_manifest)
from .model import extract, load_checkpoint, mode_for
from .reporting import attention_report, overlap_report
from .training import train_baseline, train_guided
from .verification import (ScoreSet, Trial, activity_path_for, eer, min_dcf,
                           read_scores, read_trials, score_trials, write_scores,
                           write_trials)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are exit 1
        raise UsageError(message)


def _summary(**kv) -> None:
    print(" ".join(f"{k}={v}" for k, v in kv.items()))


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _load_cfg(args) -> dict:
    cfg = parse_config_file(args.config) if args.config else default_config()
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    elif os.environ.get("GSE_SEED"):
        try:
            cfg["seed"] = int(os.environ["GSE_SEED"])
        except ValueError:
            raise UsageError(f"GSE_SEED must be an integer, got "
                             f"'{os.environ['GSE_SEED']}'") from None
    if args.workers != 1:
        raise UsageError("only --workers 1 is implemented; parallel workers "
                         "would break the determinism contract")
    return validate(cfg)


def _add_common(sub):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    sub.add_argument("--seed", type=int, help="overrides config seed and GSE_SEED")
    sub.add_argument("--workers", type=int, default=1)


# ---------------------------------------------------------------------------


def cmd_synth_data(args) -> None:
    cfg = _load_cfg(args)
    corpus = synth_corpus(cfg["corpus_speakers"], cfg["corpus_utts"], cfg["seed"])
    write_corpus(corpus, args.out)
    _summary(speakers=cfg["corpus_speakers"],
             utterances=len(corpus), out=args.out)


def cmd_mix(args) -> None:
    cfg = _load_cfg(args)
    corpus = load_corpus(args.corpus)
    _, evalset = split_corpus(corpus, cfg["corpus_train_utts"])
    if not evalset:
        raise DataError("corpus has no evaluation utterances")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"]))
    if args.kind == "onevsmany":
        _mix_onevsmany(args, out, evalset, rng)
    else:
        _mix_conversations(args, out, evalset, rng)


def _mix_onevsmany(args, out: Path, evalset, rng) -> None:
    utts = by_speaker(evalset)
    speakers = sorted(utts)
    if len(speakers) < 5:
        raise DataError("one-vs-many generation needs at least 5 eval speakers")
    corpus_wav = Path(args.corpus) / "wav"
    enroll_rel = lambda utt: os.path.relpath(corpus_wav / f"{utt.utterance_id}.wav", out)

    def pick(sid, avoid=None):
        cands = [u for u in utts[sid] if u.utterance_id != avoid] or utts[sid]
        return cands[rng.integers(0, len(cands))]

    records, trials, ratios = [], [], []
    for k in range(args.count):
        order = rng.permutation(len(speakers))
        target_spk = speakers[order[0]]
        others = [speakers[i] for i in order[1:4]]
        test_utt = pick(target_spk)
        mix = make_one_vs_many(test_utt, [pick(s) for s in others], rng)
        mix_id = f"mix{k:05d}"
        wav_rel, act_rel = f"{mix_id}.wav", f"{mix_id}.act"
        save_wav(out / wav_rel, mix.clip)
        write_activity(out / act_rel, mix.acts)
        records.append((mix_id, target_spk, mix, wav_rel, act_rel))
        ratios.append(overlap_ratio(mix.acts, mix.target_index(target_spk)))
        # one target and one nontarget trial per mixture; enrollment avoids
        # the test utterance, and the nontarget enrollment speaker is absent
        # from the mixture entirely
        enroll_t = pick(target_spk, avoid=test_utt.utterance_id)
        enroll_n = pick(speakers[order[4]])
        trials.append(Trial(1, enroll_rel(enroll_t), wav_rel, target_spk))
        trials.append(Trial(0, enroll_rel(enroll_n), wav_rel, target_spk))
    write_manifest(out / "manifest.tsv", records)
    write_trials(out / "trials.txt", trials)
    _summary(kind="onevsmany", mixtures=args.count, trials=len(trials),
             mean_overlap=_fmt(float(np.mean(ratios))),
             manifest=str(out / "manifest.tsv"))


def _mix_conversations(args, out: Path, evalset, rng) -> None:
    utts = by_speaker(evalset)
    speakers = sorted(utts)
    if len(speakers) < args.speakers:
        raise DataError(f"corpus has only {len(speakers)} eval speakers")
    ids = []
    for k in range(args.count):
        chosen = [speakers[i] for i in rng.choice(len(speakers), args.speakers,
                                                  replace=False)]
        conv = synth_conversation(utts, chosen, rng,
                                  target_duration_s=args.duration,
                                  overlap_prob=args.overlap_prob)
        conv_id = f"conv{k:05d}"
        save_wav(out / f"{conv_id}.wav", conv.clip)
        write_activity(out / f"{conv_id}.act", conv.acts)
        rttm_write(turns_from_activity(conv.acts, conv_id), out / f"{conv_id}.rttm")
        ids.append(conv_id)
    (out / "conversations.txt").write_text("\n".join(ids) + "\n")
    _summary(kind="conversation", files=args.count, out=str(out))


def cmd_train(args) -> None:
    cfg = _load_cfg(args)
    corpus = load_corpus(args.corpus)
    train_split, _ = split_corpus(corpus, cfg["corpus_train_utts"])
    loop = train_guided if args.mode == "guided" else train_baseline
    result = loop(train_split, cfg, checkpoint_dir=args.out)
    first = float(np.mean(result.losses[:10]))
    last = float(np.mean(result.losses[-10:]))
    _summary(mode=args.mode, iters=len(result.losses),
             first_loss=_fmt(first), final_loss=_fmt(last),
             checkpoint=str(Path(args.out) / "final.ckpt"))


def cmd_extract(args) -> None:
    _load_cfg(args)
    params = load_checkpoint(args.checkpoint)
    clip = load_wav(args.wav)
    if args.policy.startswith("B"):
        emb = extract(params, clip)
    else:
        act_path = args.activity or activity_path_for(args.wav)
        acts = read_activity(act_path)
        if args.target is None:
            raise UsageError("guided extraction needs --target")
        emb = extract(params, logmel(clip), acts, acts.index_of(args.target),
                      mode_for(args.policy))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(" ".join(f"{v:.8e}" for v in emb) + "\n")
    _summary(dim=emb.size, policy=args.policy, out=str(out))


def cmd_verify(args) -> None:
    _load_cfg(args)
    trials = read_trials(args.trials)
    if args.scores:
        scores = read_scores(args.scores)
        if scores.size != len(trials):
            raise DataError(f"{scores.size} scores for {len(trials)} trials")
    else:
        if not args.checkpoint:
            raise UsageError("verify needs --scores or --checkpoint")
        params = load_checkpoint(args.checkpoint)
        root = Path(args.trials).parent
        _, scores = score_trials(trials, args.policy, params, root=root)
        if args.scores_out:
            write_scores(args.scores_out, scores)
    labels = np.asarray([t.label for t in trials])
    scoreset = ScoreSet(scores[labels == 1], scores[labels == 0])
    _summary(trials=len(trials), policy=args.policy,
             eer=_fmt(eer(scoreset)), mindcf=_fmt(min_dcf(scoreset)))


def cmd_diarize(args) -> None:
    _load_cfg(args)
    params = load_checkpoint(args.checkpoint)
    clip = load_wav(args.wav)
    file_id = Path(args.wav).stem
    if args.window_rttm:
        windows, keys, embs = prepare_windows_external(
            clip, read_window_rttm(args.window_rttm), params, args.mode)
        labels = ahc_centroid(embs, args.threshold, args.min_cluster_size)
        hyp = stitch(windows, keys, labels, file_id)
    else:
        local = rttm_read(args.local_rttm)
        hyp = diarize(clip, local, params, args.mode, args.threshold,
                      args.min_cluster_size, file_id)
    rttm_write(hyp, args.out)
    _summary(file=file_id, mode=args.mode,
             speakers=len({t.speaker for t in hyp}),
             turns=len(hyp), out=args.out)


def cmd_score(args) -> None:
    _load_cfg(args)
    ref = rttm_read(args.ref)
    hyp = rttm_read(args.hyp)
    parts = der_components(ref, hyp)
    j = jer(ref, hyp)
    if args.csv:
        file_id = ref[0].file_id if ref else "file"
        write_score_csv(args.csv, [(file_id, parts["der"], j)])
    _summary(der=_fmt(parts["der"]), jer=_fmt(j), miss=_fmt(parts["miss"]),
             falarm=_fmt(parts["falarm"]), confusion=_fmt(parts["confusion"]))


def cmd_report(args) -> None:
    _load_cfg(args)
    out = Path(args.out)
    stats = overlap_report(args.manifest, out)
    extras = {}
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
        entries = read_manifest(args.manifest)
        root = Path(args.manifest).parent
        chosen = entries[0]
        if args.mixture_id:
            matches = [e for e in entries if e.mixture_id == args.mixture_id]
            if not matches:
                raise DataError(f"mixture '{args.mixture_id}' not in manifest")
            chosen = matches[0]
        attention_report(params, root / chosen.wav_path,
                         root / chosen.activity_path, chosen.target_speaker,
                         out, chosen.mixture_id)
        extras["attention"] = chosen.mixture_id
    _summary(mixtures=stats["mixtures"],
             mean_overlap=_fmt(stats["mean_overlap"]),
             full_overlap=stats["full_overlap"],
             mean_solo_s=_fmt(stats["mean_solo_s"]), out=str(out), **extras)


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="gse", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth-data", help="synthesize the speaker corpus")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = subs.add_parser("mix", help="generate evaluation mixtures")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("onevsmany", "conversation"),
                   default="onevsmany")
    p.add_argument("--count", type=int, default=250)
    p.add_argument("--speakers", type=int, default=3,
                   help="speakers per conversation")
    p.add_argument("--duration", type=float, default=60.0,
                   help="conversation target duration in seconds")
    p.add_argument("--overlap-prob", type=float, default=0.5)
    p.set_defaults(func=cmd_mix)

    p = subs.add_parser("train", help="train an extractor")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=("guided", "baseline"), default="guided")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("extract", help="extract one embedding")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--activity", help="activity sidecar (defaults to wav's .act)")
    p.add_argument("--target", help="target speaker id for guided policies")
    p.add_argument("--policy", default="P1",
                   choices=("B1", "B2", "P1", "P2", "P3", "P4"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = subs.add_parser("verify", help="score trials and report EER/minDCF")
    _add_common(p)
    p.add_argument("--trials", required=True)
    p.add_argument("--scores", help="precomputed score file")
    p.add_argument("--checkpoint")
    p.add_argument("--policy", default="P1",
                   choices=("B1", "B2", "P1", "P2", "P3", "P4"))
    p.add_argument("--scores-out")
    p.set_defaults(func=cmd_verify)

    p = subs.add_parser("diarize", help="two-stage diarization of one file")
    _add_common(p)
    p.add_argument("--wav", required=True)
    p.add_argument("--local-rttm", help="local diarization source (oracle)")
    p.add_argument("--window-rttm", help="external per-window local results")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("guided", "baseline"), default="guided")
    p.add_argument("--threshold", type=float, default=0.4)
    p.add_argument("--min-cluster-size", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diarize)

    p = subs.add_parser("score", help="DER/JER between two RTTM files")
    _add_common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--csv", help="write a file,der,jer CSV")
    p.set_defaults(func=cmd_score)

    p = subs.add_parser("report", help="histograms and attention strips")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="adds an attention strip figure")
    p.add_argument("--mixture-id", help="mixture to visualize")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) == "diarize":
            if not args.window_rttm and not args.local_rttm:
                raise UsageError("diarize needs --local-rttm or --window-rttm")
        args.func(args)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, GseError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
