import json

import pytest

from fofelm import cli
from fofelm.config import OUTPUT_ENV, load_config
from fofelm.errors import ConfigError

SMALL = """\
[run]
seed = 3
output_dir = out

[generator]
slot_types = 3
words_per_slot = 12
templates_per_application = 5
divergence = {divergence}
sentences_per_dialect = 120

[vocab]
size = 80

[model]
variant = {variant}
d = 8
N = 3
L = 1
k = 4

[train]
strategy = BASE
epochs = 2
batch_size = 64
lr = 0.01
output = base.ckpt

[adapt]
strategy = RI_A
base_checkpoint = base.ckpt
epochs = 1
batch_size = 64
lr = 0.01
output = adapted.ckpt

[bench]
count = 5
"""


def write_cfg(tmp_path, divergence=0.3, variant="MIXTURE", extra=""):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL.format(divergence=divergence, variant=variant) + extra)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def pipeline(cfg):
    for cmd in (["generate"], ["build-vocab"], ["train"], ["adapt"]):
        assert run(*cmd, cfg) == 0, cmd
    assert run("eval", cfg, "--checkpoint", "base.ckpt") == 0
    assert run("eval", cfg, "--checkpoint", "adapted.ckpt") == 0
    assert run("compare", cfg, "reports/base.json", "reports/adapted.json") == 0


def test_generate_outputs(tmp_path):
    cfg = write_cfg(tmp_path)
    assert run("generate", cfg) == 0
    out = tmp_path / "out"
    assert {p.name for p in out.iterdir()} == {"train.tsv", "dev.tsv", "test.tsv", "ground_truth.json"}
    n = sum(len(p.read_text().splitlines()) for p in out.glob("*.tsv"))
    assert n == 360


def test_bad_divergence_names_field(tmp_path, capsys):
    cfg = write_cfg(tmp_path, divergence=2.0)
    assert run("generate", cfg) == 1
    assert "divergence" in capsys.readouterr().err


def test_usage_error_exit_code(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("no-such-command")
    assert exc.value.code == 1
    assert run("generate", tmp_path / "missing.cfg") == 1


def test_seed_is_mandatory(tmp_path):
    path = tmp_path / "x.cfg"
    path.write_text("[run]\noutput_dir = out\n")
    with pytest.raises(ConfigError):
        load_config(path)
    assert run("generate", path) == 1


def test_missing_corpus_is_data_error(tmp_path):
    cfg = write_cfg(tmp_path)
    assert run("build-vocab", cfg) == 2
    assert not (tmp_path / "out" / "vocab.txt").exists()


def test_internal_error_exit_code(tmp_path, monkeypatch):
    def boom(cfg, args):
        raise RuntimeError("bug")
    monkeypatch.setitem(cli.COMMANDS, "generate", boom)
    assert run("generate", write_cfg(tmp_path)) == 3


def test_ri_a_without_base_checkpoint(tmp_path):
    cfg = write_cfg(tmp_path)
    for cmd in ("generate", "build-vocab"):
        assert run(cmd, cfg) == 0
    assert run("adapt", cfg) == 1  # base.ckpt does not exist yet
    text = cfg.read_text().replace("base_checkpoint = base.ckpt\n", "")
    cfg.write_text(text)
    assert run("adapt", cfg) == 1


def test_pipeline_reproducible(tmp_path):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        cfg = write_cfg(d)
        pipeline(cfg)
        outs.append(d / "out")
    a, b = outs
    for rel in ("train.tsv", "dev.tsv", "test.tsv", "ground_truth.json", "vocab.txt", "corpus_stats.json",
                "base.ckpt", "base.state", "adapted.ckpt", "reports/base.json", "reports/adapted.json",
                "comparison.tsv"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    for rel in ("metrics.tsv", "adapt_metrics.tsv"):
        strip = [[ln.split("\t")[:-1] for ln in (o / rel).read_text().splitlines()] for o in outs]
        assert strip[0] == strip[1]


def test_pipeline_freezing_audit(tmp_path):
    from fofelm.models import group_bytes, load_model
    cfg = write_cfg(tmp_path)
    pipeline(cfg)
    base, _ = load_model(tmp_path / "out" / "base.ckpt")
    adapted, meta = load_model(tmp_path / "out" / "adapted.ckpt")
    assert meta["strategy"] == "RI_A" and adapted.variant.value == "MIXTURE_A"
    for name in base.groups:
        assert group_bytes(adapted, lambda g: g.name == name) == group_bytes(base, lambda g: g.name == name)


def test_resume_reproduces_straight_run(tmp_path):
    straight = tmp_path / "s"
    straight.mkdir()
    cfg = write_cfg(straight)
    for cmd in ("generate", "build-vocab", "train"):
        assert run(cmd, cfg) == 0
    resumed = tmp_path / "r"
    resumed.mkdir()
    cfg2 = write_cfg(resumed)
    for cmd in ("generate", "build-vocab"):
        assert run(cmd, cfg2) == 0
    # interrupted after epoch 1: run a one-epoch job writing the same state, then resume to 2
    cfg2.write_text(cfg2.read_text().replace("epochs = 2", "epochs = 1", 1))
    assert run("train", cfg2) == 0
    cfg2.write_text(cfg2.read_text().replace("epochs = 1", "epochs = 2", 1))
    assert run("train", cfg2, "--resume") == 0
    assert (straight / "out" / "base.ckpt").read_bytes() == (resumed / "out" / "base.ckpt").read_bytes()
    losses = [[ln.split("\t")[:3] for ln in (d / "out" / "metrics.tsv").read_text().splitlines()]
              for d in (straight, resumed)]
    assert losses[0] == losses[1]


def test_inspect_ad_lists_six_subnetworks(tmp_path, capsys):
    cfg = write_cfg(tmp_path, variant="AD")
    for cmd in ("generate", "build-vocab", "train"):
        assert run(cmd, cfg) == 0
    capsys.readouterr()
    ckpt = tmp_path / "out" / "base.ckpt"
    assert run("inspect", ckpt) == 0
    out = capsys.readouterr().out
    assert "subnetworks\t6" in out
    assert sum(1 for ln in out.splitlines() if ln.startswith("subnet:")) == 6
    assert (tmp_path / "out" / "base.inspect.tsv").read_text() == out
    assert run("inspect", tmp_path / "nope.ckpt") == 2


def test_eval_empty_testset_and_bench(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    for cmd in ("generate", "build-vocab", "train"):
        assert run(cmd, cfg) == 0
    (tmp_path / "out" / "empty.tsv").write_text("")
    assert run("eval", cfg, "--checkpoint", "base.ckpt", "--testset", "empty.tsv") == 2
    assert run("bench", cfg, "--checkpoint", "base.ckpt") == 0
    report = json.loads((tmp_path / "out" / "reports" / "base.json").read_text())
    assert report["latency"]
    for lat in report["latency"].values():
        assert lat["runs"] == 3 and len(lat["run_mean_ms"]) == 3 and 1 <= lat["queries"] <= 5


def test_vocab_mismatch_is_comparison_error(tmp_path):
    cfg = write_cfg(tmp_path)
    for cmd in ("generate", "build-vocab", "train"):
        assert run(cmd, cfg) == 0
    vocab = tmp_path / "out" / "vocab.txt"
    vocab.write_text(vocab.read_text() + "zzz-extra\n")
    assert run("eval", cfg, "--checkpoint", "base.ckpt") == 2


def test_output_dir_override(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path)
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert run("generate", cfg) == 0
    assert (tmp_path / "env" / "train.tsv").exists()
    assert run("generate", cfg, "--output-dir", tmp_path / "flag") == 0
    assert (tmp_path / "flag" / "train.tsv").exists()


def test_bundled_config_parses():
    from pathlib import Path
    cfg = load_config(Path(__file__).parents[1] / "configs" / "worldenglish-desk.cfg")
    assert cfg.seed == 7 and cfg.generator_spec().divergence == 0.3
    assert cfg.train_plan().strategy.value == "BASE" and cfg.train_plan("adapt").strategy.value == "RI_A"
    assert cfg.architecture(602).variant.value == "MIXTURE"
