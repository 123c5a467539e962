"""Command-line entry point: ``fastslow <command> --config run.ini``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (a non-finite loss during training).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import NonFiniteError
from .checkpoint import atomic_write_bytes, atomic_write_text
from .config import ConfigError, RunConfig
from .data import Dataset, generate_dataset, load_dataset, save_dataset, tokenize, detokenize
from .distill import DistillConfig, train_distilled
from .fast import FastModel, embed_corpus, load_embeddings, save_embeddings, train_fast
from .index import build_exact, build_pq, load_index, save_index
from .pipeline import (QuerySet, RetrievalPipeline, SlowCorpus, benchmark, linear_fit, mean_recall, rerank_curve,
                       rows_to_csv, smallest_matching_k, synthetic_pipeline)
from .slow import SlowModel, attention_maps, train_slow
from .training import TrainingDiverged

log = logging.getLogger("fastslow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

FILES = {"dataset": "dataset.jsonl", "slow": "slow.ckpt", "fast": "fast.ckpt", "distilled": "distilled.ckpt",
         "embeddings": "embeddings.bin", "index": "index.idx"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

class Run:
    """Resolved config plus the run directory it writes into."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg, self.command = cfg, command
        self.dir = cfg.out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.dir / f"{command}.config.ini", cfg.to_ini())
        self._dataset: Dataset | None = None

    def path(self, name: str) -> Path:
        return self.dir / FILES.get(name, name)

    def need(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise DataError(f"{p} not found; run `fastslow {producer}` first")
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        atomic_write_text(p, text)
        return p

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            ds = load_dataset(self.need("dataset", "gen-data"))
            want = self.cfg.data_config()
            if ds.config != want or ds.seed != self.cfg.data.seed:
                raise DataError(f"{self.path('dataset')} was generated with a different [data] section")
            self._dataset = ds
        return self._dataset

    def vocab_size(self) -> int:
        return len(self.dataset.vocab)

    def slow_model(self, untrained: bool = False) -> SlowModel:
        model = SlowModel.init(self.cfg.slow_config(self.vocab_size()), self.cfg.run.seed)
        if not untrained:
            _load_state(model, self.need("slow", "train-slow"))
        return model

    def fast_model(self, which: str, untrained: bool = False) -> FastModel:
        model = FastModel.init(self.cfg.fast_config(self.vocab_size()), self.cfg.run.seed)
        if not untrained:
            _load_state(model, self.need(which, "distill" if which == "distilled" else "train-fast"))
        return model

    def pipeline(self, untrained: bool = False) -> RetrievalPipeline:
        p = self.cfg.pipeline
        split = p.split
        slow = self.slow_model(untrained)
        fast = self.fast_model(self.cfg.index.student, untrained)
        if untrained:
            index = build_exact(embed_corpus(self.dataset, split, fast))
        else:
            index = load_index(self.need("index", "build-index"))
            if list(index.ids) != sorted(self.dataset.split_ids(split)):
                raise DataError(f"index does not cover the [pipeline] split {split!r}; rebuild it")
        corpus = SlowCorpus.from_dataset(slow, self.dataset, split, precompute=p.precompute)
        return RetrievalPipeline(fast, index, corpus, K=min(p.K, len(index)), beta=p.beta)


def _load_state(model, path: Path) -> None:
    try:
        model.load_state_dict(checkpoint.load(path))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: checkpoint does not match the configured model ({exc})") from None


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _print_seed(cfg: RunConfig) -> None:
    print(f"seed: {cfg.run.seed} (data seed {cfg.data.seed})")


# ---------------------------------------------------------------- commands

def cmd_gen_data(run: Run, args) -> None:
    ds = generate_dataset(run.cfg.data_config(), run.cfg.data.seed)
    save_dataset(ds, run.path("dataset"))
    counts = {s: len(ds.split_ids(s)) for s in ("train", "val", "test")}
    print(f"dataset: {counts} scenes, {len(ds.captions)} captions, vocabulary {len(ds.vocab)} -> "
          f"{run.path('dataset')}")


def cmd_train_slow(run: Run, args) -> None:
    t = time.perf_counter()
    model, history = train_slow(run.dataset, run.cfg.slow_config(run.vocab_size()),
                                run.cfg.train_config("slow", args.steps))
    checkpoint.save(run.path("slow"), model.state_dict())
    run.write_text("slow_log.csv", history.to_csv())
    _report_training("slow", history, t, run.path("slow"))


def cmd_train_fast(run: Run, args) -> None:
    t = time.perf_counter()
    model, history = train_fast(run.dataset, run.cfg.fast_config(run.vocab_size()),
                                run.cfg.train_config("fast", args.steps))
    checkpoint.save(run.path("fast"), model.state_dict())
    run.write_text("fast_log.csv", history.to_csv())
    _report_training("fast", history, t, run.path("fast"))


def cmd_distill(run: Run, args) -> None:
    t = time.perf_counter()
    teacher = run.slow_model()
    model, history = train_distilled(run.dataset, teacher, run.cfg.fast_config(run.vocab_size()),
                                     run.cfg.train_config("fast", args.steps), run.cfg.distill_config())
    checkpoint.save(run.path("distilled"), model.state_dict())
    run.write_text("distill_log.csv", history.to_csv())
    _report_training("distilled", history, t, run.path("distilled"))


def _report_training(name, history, t0, path) -> None:
    losses = history.losses()
    last = f"{losses[-1]:.4f}" if len(losses) else "n/a"
    print(f"{name}: {len(losses)} steps in {time.perf_counter() - t0:.1f}s, final loss {last} -> {path}")


def cmd_build_index(run: Run, args) -> None:
    ic = run.cfg.index
    student = run.fast_model(ic.student)
    emb = embed_corpus(run.dataset, run.cfg.pipeline.split, student)
    save_embeddings(run.path("embeddings"), emb)
    if ic.kind == "exact":
        index = build_exact(emb)
    else:
        index = build_pq(emb, M=ic.M, Kc=ic.Kc, iters=ic.iters, seed=ic.seed)
        print(f"pq: final quantization error per sub-space {[round(e, 5) for e in index.report.final_error]}")
    save_index(run.path("index"), index)
    print(f"{ic.kind} index over {len(emb)} {run.cfg.pipeline.split} scenes from the {ic.student} model, "
          f"embedding checksum {emb.checksum():016x} -> {run.path('index')}")


def cmd_query(run: Run, args) -> None:
    pipe = run.pipeline()
    caption = tokenize(args.text, run.dataset.vocab)
    unknown = [w for w, t in zip(caption.text.split(), caption.content) if t == 3]
    if unknown:
        print(f"note: unknown words mapped to <unk>: {' '.join(unknown)}")
    ranked, stats = pipe.query(caption)
    top = min(args.top or run.cfg.pipeline.top, len(ranked))
    rows = [(i + 1, int(ranked.ids[i]), ranked.stage(i), float(ranked.fast[i]), float(ranked.slow[i]),
             float(ranked.combined[i])) for i in range(len(ranked))]
    run.write_text("query.csv", _csv(["rank", "scene_id", "stage", "fast", "slow", "combined"], rows))
    print(f"query: {detokenize(caption, run.dataset.vocab)!r}  K={pipe.K} beta={pipe.beta} "
          f"slow calls {stats.slow_calls}, {stats.total_ms:.1f} ms")
    for rank, sid, stage, f, h, c in rows[:top]:
        text = run.dataset.gold_caption(sid).text
        print(f"{rank:>4}  scene {sid:>5}  {stage:<6}  fast {f:9.4f}  combined {c:11.4f}  {text}")


def cmd_eval(run: Run, args) -> None:
    pipe = run.pipeline(untrained=args.untrained)
    split = run.cfg.pipeline.split
    qs = QuerySet.gold_captions(run.dataset, split)
    configured = run.cfg.index.student
    # every student with a checkpoint is reported; the configured one uses the built index
    students = [configured] + [w for w in ("fast", "distilled")
                               if w != configured and (args.untrained or run.path(w).exists())]
    rows = []
    for which in students:
        p = pipe
        if which != configured:
            model = run.fast_model(which, args.untrained)
            p = RetrievalPipeline(model, build_exact(embed_corpus(run.dataset, split, model)), pipe.slow,
                                  K=pipe.K, beta=pipe.beta)
        fast = [p.fast_only(c)[0] for c in qs.captions]
        both = [p.query(c) for c in qs.captions]
        rows.append(("fast_only", which, 0, "", mean_recall(fast, qs.golds, 1), mean_recall(fast, qs.golds, 5),
                     0.0))
        rows.append(("fast_slow", which, p.K, p.beta, mean_recall([r for r, _ in both], qs.golds, 1),
                     mean_recall([r for r, _ in both], qs.golds, 5),
                     float(np.mean([s.slow_calls for _, s in both]))))
    if not args.no_exhaustive:
        slow = [pipe.slow_only(c)[0] for c in qs.captions]
        rows.append(("slow_exhaustive", "", len(pipe), "", mean_recall(slow, qs.golds, 1),
                     mean_recall(slow, qs.golds, 5), float(len(pipe))))
    run.write_text("eval.csv", _csv(["system", "student", "K", "beta", "R1", "R5", "mean_slow_calls"], rows))
    print(f"{len(qs)} queries over {len(pipe)} scenes (chance R@1 = {1 / len(pipe):.4f})")
    for name, which, K, beta, r1, r5, _ in rows:
        print(f"{name:<16} {which:<10} K={K:<5} R@1 {r1:.4f}  R@5 {r5:.4f}")


def cmd_rerank_curve(run: Run, args) -> None:
    pipe = run.pipeline()
    p = run.cfg.pipeline
    qs = QuerySet.gold_captions(run.dataset, p.split)
    Ks = sorted({min(k, len(pipe)) for k in p.curve_K} | {len(pipe)})
    rows = rerank_curve(pipe, qs, Ks, p.curve_beta, timings=run.cfg.run.timings)
    path = run.write_text("rerank_curve.csv", rows_to_csv(rows))
    k = smallest_matching_k(rows)
    print(rows_to_csv(rows), end="")
    print(f"smallest K reaching the slow-only R@1: {k if k is not None else 'none'} -> {path}")


def cmd_sweep_distill(run: Run, args) -> None:
    d = run.cfg.distill
    ds, teacher = run.dataset, run.slow_model()
    fast_cfg = run.cfg.fast_config(run.vocab_size())
    train_cfg = run.cfg.train_config("fast", args.steps)
    split = "val"  # hyperparameters are compared on held-out validation scenes
    qs = QuerySet.gold_captions(ds, split)
    grid = [(t, a) for t in d.sweep_tau for a in d.sweep_alpha_over_tau2]
    default = (d.tau, d.alpha_over_tau2)
    points = grid + ([default] if default not in grid else [])
    rows = []
    for tau, a in points:
        dc = DistillConfig(tau, a)
        student, history = train_distilled(ds, teacher, fast_cfg, train_cfg, dc)
        index = build_exact(embed_corpus(ds, split, student))
        ranked = [index.topk(student.embed_texts([c]).data[0], len(index)).ids for c in qs.captions]
        r1, r5 = mean_recall(ranked, qs.golds, 1), mean_recall(ranked, qs.golds, 5)
        losses = history.losses()
        rows.append((tau, a, r1, r5, dc.alpha, "default" if (tau, a) == default else "grid",
                     float(losses[-1]) if len(losses) else float("nan")))
        print(f"tau={tau:g} alpha/tau^2={a:g}: val R@1 {r1:.4f} R@5 {r5:.4f}")
    path = run.write_text("sweep_distill.csv",
                          _csv(["tau", "alpha_over_tau2", "R1_val", "R5_val", "alpha", "kind", "final_loss"], rows))
    print(f"{len(rows)} configurations -> {path}")


def cmd_bench(run: Run, args) -> None:
    p = run.cfg.pipeline
    warmup = p.bench_warmup if args.warmup is None else args.warmup
    n_q = args.queries or p.bench_queries
    if args.sizes:
        ds = run.dataset
        slow, fast = run.slow_model(), run.fast_model(run.cfg.index.student)
        bank = ds.renders(ds.split_ids(p.split))
        captions = [ds.gold_caption(i).tokens for i in ds.split_ids(p.split)[:n_q]]
        reports, exh = [], []
        for n in args.sizes:
            pipe = synthetic_pipeline(fast, slow, bank, n, seed=run.cfg.run.seed, K=min(p.K, n))
            rep = benchmark(pipe, captions, Ks=(pipe.K,), warmup=warmup, exhaustive_queries=args.exhaustive_queries,
                            exhaustive_warmup=args.exhaustive_warmup)
            reports.append(rep)
            exh.append(rep.get("slow_exhaustive").median_ms)
            print(rep.table(), end="\n\n")
        text = "".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1] for i, r in enumerate(reports))
        if len(args.sizes) >= 2:
            slope, intercept, r2 = linear_fit(args.sizes, exh)
            slow_stage = [r.get("fast_slow").slow_stage_median_ms for r in reports]
            print(f"slow-exhaustive fit: {slope:.4f} ms per item, r^2 = {r2:.4f}; "
                  f"fast&slow slow-stage max/min ratio {max(slow_stage) / min(slow_stage):.2f}")
    else:
        pipe = run.pipeline()
        qs = QuerySet.gold_captions(run.dataset, p.split)
        rep = benchmark(pipe, qs.captions[:n_q], Ks=sorted({min(k, len(pipe)) for k in p.curve_K}),
                        warmup=warmup, exhaustive_queries=args.exhaustive_queries,
                        exhaustive_warmup=args.exhaustive_warmup)
        print(rep.table())
        text = rep.to_csv()
    run.write_text("bench.csv", text)
    print(f"-> {run.path('bench.csv')}")


def cmd_dump_attention(run: Run, args) -> None:
    ds = run.dataset
    if not 0 <= args.scene < len(ds.scenes):
        raise DataError(f"scene {args.scene} not in dataset")
    caption = tokenize(args.text, ds.vocab) if args.text else ds.gold_caption(args.scene)
    rec = attention_maps(run.slow_model(), ds.render(args.scene), caption.tokens)
    arrays, rows = {}, []
    for direction in ("fwd", "bwd"):
        toks = rec.tokens[direction]
        for layer, (s, w, flag) in enumerate(zip(rec.scores[direction], rec.weights[direction],
                                                 rec.flagged[direction])):
            arrays[f"{direction}.L{layer}.scores"] = s
            arrays[f"{direction}.L{layer}.weights"] = w
            for pos, head in enumerate(flag):
                rows.append((direction, layer, pos, ds.vocab.tokens[toks[pos]], int(head)))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(run.path("attention.npz"), buf.getvalue())
    run.write_text("attention.csv", _csv(["direction", "layer", "position", "token", "flagged_head"], rows))
    print(f"scene {args.scene}, caption {caption.text!r}: maps at {rec.resolution}x{rec.resolution} "
          f"-> {run.path('attention.npz')}, {run.path('attention.csv')}")


# ---------------------------------------------------------------- argument parsing

def _sizes(text: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fastslow", description="Fast dual encoder + slow re-ranker retrieval experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="INI run configuration (defaults if omitted)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("--out", help="run directory (overrides [run] out_dir)")
        p.set_defaults(fn=fn)
        return p

    command("gen-data", cmd_gen_data, "generate the synthetic scene/caption dataset")
    for name, fn, what in (("train-slow", cmd_train_slow, "train the captioning (slow) model"),
                           ("train-fast", cmd_train_fast, "train the dual encoder with NCE"),
                           ("distill", cmd_distill, "train a dual encoder distilled from the slow model")):
        command(name, fn, what).add_argument("--steps", type=int, help="override the number of steps")
    command("build-index", cmd_build_index, "embed the corpus and build the search index")
    q = command("query", cmd_query, "rank the corpus for one caption")
    q.add_argument("--text", required=True, help="caption text; unknown words map to <unk>")
    q.add_argument("--top", type=int, help="rows to print")
    e = command("eval", cmd_eval, "recall@1/5 of fast-only, fast & slow and slow-exhaustive retrieval")
    e.add_argument("--untrained", action="store_true", help="use freshly initialised models")
    e.add_argument("--no-exhaustive", action="store_true", help="skip exhaustive slow scoring")
    command("rerank-curve", cmd_rerank_curve, "recall over the configured K and beta grid")
    s = command("sweep-distill", cmd_sweep_distill, "distil over the tau x alpha/tau^2 grid")
    s.add_argument("--steps", type=int, help="override the number of steps per grid point")
    b = command("bench", cmd_bench, "query latency of fast-only, slow-exhaustive and fast & slow")
    b.add_argument("--sizes", type=_sizes, help="comma-separated synthetic corpus sizes")
    b.add_argument("--queries", type=int, help="number of timed queries")
    b.add_argument("--warmup", type=int, help="untimed warm-up queries per mode")
    b.add_argument("--exhaustive-queries", type=int, help="limit timed exhaustive queries")
    b.add_argument("--exhaustive-warmup", type=int, help="warm-up queries for exhaustive scoring")
    d = command("dump-attention", cmd_dump_attention, "save cross-attention maps for one scene")
    d.add_argument("--scene", type=int, required=True)
    d.add_argument("--text", help="caption (default: the scene's gold caption)")
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set) + ([f"run.out_dir={args.out}"] if args.out else [])
        cfg = RunConfig.load(args.config, overrides)
        run = Run(cfg, args.command)
        _print_seed(cfg)
        args.fn(run, args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # any other failure is reported as a data error
        print(f"error: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
