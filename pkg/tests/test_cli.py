import hashlib
import json
from pathlib import Path

import pytest

from xylab.cli import OUTPUT_ENV, load_config, main
from xylab.datapipe import read_corpus
from xylab.model import load_checkpoint

TINY = {
    "universe": {"v_content": 24, "length": {"kind": "uniform", "low": 3, "max_len": 8}},
    "corpus": {"pairs_per_direction": 60, "direct_pairs_per_direction": 20, "dev_per_direction": 5,
               "test_per_direction": 6, "mix_cap": 20, "noise_per_kind": 2},
    "domains": {"pairs_per_direction": 20, "dev_per_direction": 4, "test_per_direction": 5, "support_size": 6},
    "model": {"d_model": 16, "d_ff": 32, "n_heads": 2, "n_enc_layers": 2, "n_dec_layers": 1,
              "enc_no_residual": 1},
    "matrix": {"scratch_steps": 20, "continue_steps": 20, "direct_steps": 20, "domain_steps": 6,
               "eval_every": 10, "domain_eval_every": 3, "batch_size": 8, "warmup": 5, "ft_warmup": 5,
               "domain_warmup": 2},
    "eval": {"resamples": 100},
}


def write_cfg(tmp_path, doc=None, name="cfg.json", **over):
    doc = json.loads(json.dumps(doc or TINY))
    doc["output_dir"] = str(tmp_path / "out")
    doc.update(over)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def digests(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_counts_and_idempotence(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["-c", cfg, "gen"]) == 0
    out = tmp_path / "out"
    n_ex = 4 * 2  # english-centric directions in the 5-language universe
    assert sum(1 for _ in read_corpus(out / "data/raw/train_ex.tsv")) == n_ex * 60
    assert sum(1 for _ in read_corpus(out / "data/dev.tsv")) == 20 * 5
    assert sum(1 for _ in read_corpus(out / "data/test.tsv")) == 20 * 6
    manifest = json.loads((out / "data/manifest.json").read_text())
    assert manifest["counts"]["train_ex"] == n_ex * 60
    first = digests(out)
    assert main(["-c", cfg, "gen"]) == 0
    assert digests(out) == first


def test_validation_errors_write_nothing(tmp_path, capsys):
    doc = json.loads(json.dumps(TINY))
    doc["universe"]["n_languages"] = 2
    cfg = write_cfg(tmp_path, doc)
    assert main(["-c", cfg, "gen"]) == 1
    assert "universe.n_languages" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()
    cfg = write_cfg(tmp_path, name="bad.json", bogus=1)
    assert main(["-c", cfg, "gen"]) == 1
    assert "bogus" in capsys.readouterr().err
    doc = json.loads(json.dumps(TINY))
    doc["model"]["d_model"] = 15
    assert main(["-c", write_cfg(tmp_path, doc, name="m.json"), "gen"]) == 1
    assert main(["-c", str(tmp_path / "missing.json"), "gen"]) == 1
    assert main(["nonsense"]) == 1


def test_toml_config(tmp_path):
    if not _has_toml():
        pytest.skip("no TOML parser on this interpreter")
    path = tmp_path / "cfg.toml"
    path.write_text('output_dir = "o"\nseed = 3\n[universe]\nv_content = 48\n')
    cfg = load_config(path)
    assert cfg.seed == 3 and cfg.universe.v_content == 48


def _has_toml():
    try:
        import tomllib  # noqa: F401
        return True
    except ModuleNotFoundError:
        try:
            import tomli  # noqa: F401
            return True
        except ModuleNotFoundError:
            return False


def test_output_dir_env_override(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path)
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "elsewhere"))
    assert main(["-c", cfg, "gen"]) == 0
    assert (tmp_path / "elsewhere/universe.json").exists()
    assert not (tmp_path / "out").exists()


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(tmp)
    assert main(["-c", cfg, "gen"]) == 0
    assert main(["-c", cfg, "filter"]) == 0
    return tmp, cfg


def test_filter_tallies(prepared):
    tmp, _ = prepared
    tally = json.loads((tmp / "out/data/filter_tally.json").read_text())
    assert tally["train_ex"] == {"kept": 8 * 60 - 6, "malformed": 0, "length": 2, "ratio": 2, "lid": 2}


def test_eval_oracle(prepared, capsys):
    tmp, cfg = prepared
    assert main(["-c", cfg, "eval", "oracle"]) == 0
    rep = json.loads((tmp / "out/reports/eval_oracle_test.json").read_text())
    assert set(rep["bleu"].values()) == {100.0}
    assert set(rep["off_target"].values()) == {0.0}
    assert "100.00" in capsys.readouterr().out


def test_compare_with_itself_all_ties(prepared):
    tmp, cfg = prepared
    assert main(["-c", cfg, "compare", "oracle", "oracle"]) == 0
    doc = json.loads((tmp / "out/reports/compare_test.json").read_text())
    results = next(iter(doc["significance"].values()))
    assert results and all(r["win"] == "tie" for r in results)


def test_train_requires_parent(prepared, capsys):
    _, cfg = prepared
    assert main(["-c", cfg, "train", "P"]) == 2
    assert "step9.ckpt" in capsys.readouterr().err
    assert main(["-c", cfg, "train", "nope"]) == 1


def test_train_parentage(prepared):
    tmp, cfg = prepared
    assert main(["-c", cfg, "train", "B"]) == 0
    assert (tmp / "out/runs/B/step9.ckpt").exists()
    assert main(["-c", cfg, "train", "P"]) == 0
    p = load_checkpoint(tmp / "out/runs/P/final.ckpt")
    assert p.provenance["parent"] == "B" and p.provenance["scheme"] == "ST-T"
    assert p.provenance["total_steps"] == 9 + 20
    assert main(["-c", cfg, "eval", "P", "--split", "dev"]) == 0


def test_repro_outputs(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    code = main(["-c", cfg, "repro"])
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith("criterion ")]
    assert len(lines) == 6
    assert code == (0 if all(l.endswith("PASS") for l in lines) else 2)
    curves = sorted(p.name for p in (tmp_path / "out/curves").iterdir())
    assert curves == ["fig2_scheme_curves.csv", "fig3_continue_curves.csv", "fig4_direct_curves.csv"]
    metrics = json.loads((tmp_path / "out/reports/metrics.json").read_text())
    assert metrics["criteria"]["6_off_target_exactness"]["pass"]
    assert metrics["criteria"]["8_filter_exactness"]["pass"]
    assert len(metrics["domain_ft"]) == 12
    for p in (tmp_path / "out").rglob("*"):
        assert p.resolve().is_relative_to((tmp_path / "out").resolve())
