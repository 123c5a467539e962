import csv
import io

import pytest

from fastslow import cli
from fastslow.config import ConfigError, RunConfig

TINY = """
[data]
n_train = 12
n_val = 2
n_test = 10

[model]
encoder_widths = 4, 4, 8
d = 8
embed_dim = 8
d_model = 8
n_heads = 2
n_layers = 1

[optim]
slow_steps = 3
slow_batch = 4
fast_steps = 3
fast_batch = 4
warmup = 1

[index]
M = 2
Kc = 4
iters = 2

[pipeline]
K = 3
curve_K = 1, 3
curve_beta = 0, 1
bench_queries = 2
bench_warmup = 1

[run]
timings = false
"""

SCRIPT = ["gen-data", "train-slow", "train-fast", "distill", "build-index", "rerank-curve"]
CSVS = ["slow_log.csv", "fast_log.csv", "distill_log.csv", "rerank_curve.csv"]


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    p.write_text(TINY)
    return p


def run(cfg_path, out, *args):
    return cli.main([args[0], "--config", str(cfg_path), "--out", str(out), *args[1:]])


@pytest.fixture(scope="module")
def done(cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in SCRIPT:
        assert run(cfg_path, out, cmd) == 0, cmd
    return out


def read_csv(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig.defaults()
        again = RunConfig.parse(cfg.to_ini())
        assert again.values == cfg.values

    def test_tiny_round_trip(self):
        cfg = RunConfig.parse(TINY)
        assert cfg.model.encoder_widths == (4, 4, 8) and cfg.index.M == 2 and cfg.run.timings is False
        assert RunConfig.parse(cfg.to_ini()).values == cfg.values

    @pytest.mark.parametrize("text, match", [
        ("[data]\nnumber = 3\n", "unknown key"),
        ("[extras]\na = 1\n", "unknown section"),
        ("[data]\nn_train = many\n", "n_train"),
        ("[index]\nkind = lsh\n", "one of"),
        ("[run]\ntimings = maybe\n", "boolean"),
        ("n_train = 3\n", "section"),
    ])
    def test_rejects(self, text, match):
        with pytest.raises(ConfigError, match=match):
            RunConfig.parse(text)

    def test_overrides(self):
        cfg = RunConfig.parse(TINY, ["pipeline.K=5", "distill.tau=2.5"])
        assert cfg.pipeline.K == 5 and cfg.distill.tau == 2.5
        with pytest.raises(ConfigError, match="form"):
            RunConfig.parse("", ["K=5"])
        with pytest.raises(ConfigError, match="unknown key"):
            RunConfig.parse("", ["pipeline.k=5"])

    def test_builders(self):
        cfg = RunConfig.parse(TINY)
        assert cfg.data_config().n_test == 10
        slow = cfg.slow_config(22)
        assert slow.decoder.d_visual == slow.encoder.d == 8 and slow.decoder.max_len == 18
        assert cfg.train_config("fast").batch_size == 4 and cfg.train_config("slow", 9).steps == 9
        assert cfg.distill_config().alpha == pytest.approx(0.1)


class TestCommands:
    def test_outputs_and_resolved_configs(self, done):
        for name in ("dataset.jsonl", "slow.ckpt", "fast.ckpt", "distilled.ckpt", "embeddings.bin", "index.idx",
                     *CSVS):
            assert (done / name).exists(), name
        for cmd in SCRIPT:
            resolved = RunConfig.parse((done / f"{cmd}.config.ini").read_text())
            assert resolved.values["data"] == RunConfig.parse(TINY).values["data"]

    def test_seed_printed(self, cfg_path, done, capsys):
        assert run(cfg_path, done, "eval", "--set", "run.seed=0") == 0
        assert "seed: 0" in capsys.readouterr().out

    def test_curve_rows(self, done):
        rows = read_csv(done / "rerank_curve.csv")
        assert rows[0]["beta"] == "fast_only" and rows[-1]["beta"] == "slow_only"
        assert all(float(r["mean_slow_calls"]) == float(r["K"]) for r in rows)
        assert all(float(r["mean_wall_ms"]) == 0.0 for r in rows)

    def test_full_run_is_bit_identical(self, cfg_path, done, tmp_path):
        for cmd in SCRIPT:
            assert run(cfg_path, tmp_path, cmd) == 0
        for name in CSVS:
            assert (tmp_path / name).read_bytes() == (done / name).read_bytes(), name

    def test_query_with_unknown_words(self, cfg_path, done, capsys):
        assert run(cfg_path, done, "query", "--text", "a purple dodecahedron near a circle") == 0
        assert "<unk>" in capsys.readouterr().out
        rows = read_csv(done / "query.csv")
        assert len(rows) == 10 and [r["stage"] for r in rows[:3]] == ["rerank"] * 3

    def test_eval_untrained_is_chance(self, cfg_path, tmp_path, capsys):
        over = ["--set", "data.n_test=60"]
        assert run(cfg_path, tmp_path, "gen-data", *over) == 0
        assert run(cfg_path, tmp_path, "eval", "--untrained", *over) == 0
        rows = {(r["system"], r["student"]): r for r in read_csv(tmp_path / "eval.csv")}
        assert set(rows) == {(s, w) for s in ("fast_only", "fast_slow") for w in ("fast", "distilled")} | {
            ("slow_exhaustive", "")}
        # 60 queries, chance 1/60: stay well under 5 hits
        assert all(float(r["R1"]) <= 5 / 60 for r in rows.values())
        assert float(rows["fast_slow", "distilled"]["mean_slow_calls"]) == 3.0

    def test_sweep_grid(self, cfg_path, done):
        assert run(cfg_path, done, "sweep-distill", "--steps", "1") == 0
        rows = read_csv(done / "sweep_distill.csv")
        assert list(rows[0])[:4] == ["tau", "alpha_over_tau2", "R1_val", "R5_val"]
        grid = [(float(r["tau"]), float(r["alpha_over_tau2"])) for r in rows if r["kind"] == "grid"]
        assert grid == [(t, a) for t in (1.0, 10.0) for a in (0.0, 0.1, 1.0, 10.0)]
        default = [r for r in rows if r["kind"] == "default"]
        assert len(default) == 1 and float(default[0]["tau"]) == 10.0
        assert float(default[0]["alpha_over_tau2"]) == 0.001

    def test_pq_index_and_bench(self, cfg_path, done, capsys):
        assert run(cfg_path, done, "build-index", "--set", "index.kind=pq") == 0
        assert run(cfg_path, done, "bench", "--set", "index.kind=pq") == 0
        assert "speedup" in capsys.readouterr().out
        assert run(cfg_path, done, "bench", "--sizes", "20,40", "--queries", "2") == 0
        rows = read_csv(done / "bench.csv")
        assert {r["N"] for r in rows} == {"20", "40"}
        assert run(cfg_path, done, "build-index") == 0

    def test_dump_attention(self, cfg_path, done):
        assert run(cfg_path, done, "dump-attention", "--scene", "3") == 0
        rows = read_csv(done / "attention.csv")
        assert {r["direction"] for r in rows} == {"fwd", "bwd"}
        assert (done / "attention.npz").stat().st_size > 0


class TestExitCodes:
    def test_usage(self, capsys):
        assert cli.main([]) == 1
        assert cli.main(["train-fast", "--bogus"]) == 1
        assert cli.main(["query"]) == 1

    def test_bad_config_is_usage(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[data]\nsize = 3\n")
        assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert "unknown key" in err and len(err.strip().splitlines()) == 1

    def test_missing_inputs_is_data_error(self, cfg_path, tmp_path, capsys):
        assert run(cfg_path, tmp_path, "train-fast") == 2
        assert "gen-data" in capsys.readouterr().err

    def test_dataset_config_mismatch(self, cfg_path, done):
        assert run(cfg_path, done, "train-fast", "--set", "data.n_test=11") == 2

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergence_is_numeric(self, cfg_path, tmp_path, capsys):
        assert run(cfg_path, tmp_path, "gen-data") == 0
        assert run(cfg_path, tmp_path, "train-fast", "--set", "optim.fast_lr=1e300",
                   "--set", "optim.clip_norm=none") == 3
        assert "step" in capsys.readouterr().err
        assert not (tmp_path / "fast.ckpt").exists()
