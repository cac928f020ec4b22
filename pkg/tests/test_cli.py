import os

import numpy as np
import pytest

from dualattack import cli
from dualattack import data as D
from dualattack import models as M

SPEC = D.DatasetSpec(num_classes=4, image_h=16, image_w=16, train_per_class=30, eval_per_class=8,
                     noise_std=0.1)
HYPER = D.TrainHyper(lr=0.05, epochs=5, batch_size=20, grad_clip=0.5)


def _vit(depth, p=4):
    return M.ViTConfig(image_h=16, image_w=16, patch_size=p, embed_dim=16, head_dim=8, num_heads=2,
                       depth=depth, mlp_hidden=16, num_classes=4)


ROSTER = (
    ("S0", _vit(3), HYPER),
    ("S1", _vit(1, p=8), HYPER),
    ("C0", M.CNNConfig(image_h=16, image_w=16, conv_channels=(6,), pools=(2,), num_classes=4),
     D.TrainHyper(lr=0.1, epochs=5, batch_size=20, grad_clip=1.0)),
)


@pytest.fixture
def tiny_zoo(monkeypatch, tmp_path_factory):
    monkeypatch.setattr(D, "ZOO_ROSTER", ROSTER)
    monkeypatch.setattr(D, "zoo_spec", lambda seed: D.DatasetSpec(**{**SPEC.__dict__, "seed": seed}))
    monkeypatch.setattr(D, "ZOO_MIN_ACCURACY", 0.0)
    return str(tmp_path_factory.getbasetemp() / "shared_zoo")


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_unknown_subcommand(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 1 and "usage" in err


def test_unknown_flag(capsys):
    code, _, err = run(capsys, "zoo", "--bogus")
    assert code == 1 and "usage" in err


def test_bad_jobs(capsys):
    code, _, err = run(capsys, "gradcheck", "--jobs", "0")
    assert code == 1


def test_attack_config_from_flags():
    args = cli.build_parser().parse_args(["attack", "--eps255", "16", "--iters", "10"])
    cfg = cli.attack_config(args)
    assert cfg.alpha == pytest.approx(1.6 / 255)
    assert cfg.use_pna and cfg.use_patchout and cfg.use_l2 and cfg.name == "Dual"
    args = cli.build_parser().parse_args(["attack", "--no-pna", "--no-patchout", "--no-l2", "--mi", "1.0",
                                          "--step", "2", "--no-sign", "--lambda", "0.5", "--patches", "7"])
    cfg = cli.attack_config(args)
    assert cfg.name == "MI" and cfg.mi_momentum == 1.0 and not cfg.sign_step
    assert cfg.alpha == pytest.approx(2 / 255) and cfg.lam == 0.5 and cfg.patch_count == 7


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", "7")
    assert code == 0 and "gradcheck passed" in out
    assert "pna" in out and "kronecker" in out


def test_gen_data_deterministic(capsys, tmp_path, tiny_zoo):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "gen-data", "--seed", "1", "--out-dir", str(a))[0] == 0
    assert run(capsys, "gen-data", "--seed", "1", "--out-dir", str(b))[0] == 0
    fa, fb = sorted(os.listdir(a)), sorted(os.listdir(b))
    assert fa == fb and (a / fa[0]).read_bytes() == (b / fb[0]).read_bytes()
    code, out, _ = run(capsys, "dump-images", str(a / fa[0]), "--count", "2", "--out-dir", str(tmp_path / "ppm"))
    assert code == 0
    ppm = sorted((tmp_path / "ppm").iterdir())
    assert len(ppm) == 2 and ppm[0].read_bytes().startswith(b"P6\n16 16\n255\n")
    assert len(ppm[0].read_bytes()) == len(b"P6\n16 16\n255\n") + 16 * 16 * 3


def test_train_member(capsys, tmp_path, tiny_zoo):
    code, out, _ = run(capsys, "train", "--member", "S1", "--seed", "3", "--out-dir", str(tmp_path))
    assert code == 0 and "eval accuracy" in out
    assert M.load_checkpoint(tmp_path / "model_S1_seed3.pgrd").label == "S1"
    assert run(capsys, "train", "--member", "nope", "--out-dir", str(tmp_path))[0] == 1


def test_zoo_attack_evaluate(capsys, tmp_path, tiny_zoo):
    common = ["--seed", "2", "--out-dir", str(tmp_path), "--zoo-dir", tiny_zoo, "--budget", "8"]
    code, out, _ = run(capsys, "zoo", *common)
    assert code == 0 and out.count("eval accuracy") == 3
    code, out, _ = run(capsys, "attack", *common, "--iters", "2")
    assert code == 0 and "alpha 8/255" in out
    folder = next(p for p in tmp_path.iterdir() if p.name.startswith("attack_seed2_S0_"))
    files = sorted(folder.iterdir())
    assert 0 < len(files) <= 8
    for f in files:
        _, meta, t = M.read_container(f)
        assert set(t) == {"delta", "x_adv"} and "config_json" in meta
        assert np.max(np.abs(t["delta"])) <= 16 / 255 + 1e-15
    code, out, _ = run(capsys, "evaluate", str(folder), *common)
    assert code == 0 and out.count("ASR") == 3
    code, _, _ = run(capsys, "dump-images", str(folder), "--count", "1", "--out-dir", str(tmp_path / "ppm"))
    assert code == 0


def test_experiment_commands(capsys, tmp_path, tiny_zoo):
    common = ["--seed", "2", "--zoo-dir", tiny_zoo, "--budget", "6", "--iters", "2"]
    for cmd, extra, n_rows in [
        ("transfer-matrix", [], 2 * 2 * 2),
        ("ablate", [], 7 * 2 * 2),
        ("pna-paths", [], 8 * 2),
        ("sweep", ["--surrogate", "S1"], None),
        ("patch-stacking", ["--stages", "1,2"], 4 * 2),
    ]:
        out_dir = tmp_path / cmd
        code, out, err = run(capsys, cmd, *common, "--out-dir", str(out_dir), *extra)
        assert code == 0, err
        csvs = [p for p in out_dir.iterdir() if p.suffix == ".csv"]
        assert len(csvs) == 1
        lines = csvs[0].read_text().splitlines()
        assert lines[0] == ",".join(cli.H.CSV_HEADER)
        if n_rows is not None:
            assert len(lines) - 1 == n_rows


def test_ablate_writes_seven_configs(capsys, tmp_path, tiny_zoo):
    code, _, _ = run(capsys, "ablate", "--seed", "2", "--zoo-dir", tiny_zoo, "--budget", "4", "--iters", "1",
                     "--surrogate", "S1", "--out-dir", str(tmp_path))
    assert code == 0
    csv_path = next(p for p in tmp_path.iterdir() if p.suffix == ".csv")
    attacks = {line.split(",")[2] for line in csv_path.read_text().splitlines()[1:]}
    assert len(attacks) == 7


def test_rerun_is_byte_identical_across_jobs(capsys, tmp_path, tiny_zoo):
    common = ["--seed", "2", "--zoo-dir", tiny_zoo, "--budget", "8", "--iters", "2"]
    outs = []
    for i, jobs in enumerate(["1", "1", "3"]):
        d = tmp_path / str(i)
        assert run(capsys, "transfer-matrix", *common, "--jobs", jobs, "--out-dir", str(d))[0] == 0
        outs.append({p.name: p.read_bytes() for p in d.iterdir()})
    assert outs[0] == outs[1] == outs[2]


def test_validation_failure_exit_code(capsys, tmp_path, tiny_zoo):
    code, _, err = run(capsys, "pna-paths", "--seed", "2", "--zoo-dir", tiny_zoo, "--surrogate", "S1",
                       "--budget", "4", "--out-dir", str(tmp_path))
    assert code == 2 and "depth" in err
    code, _, err = run(capsys, "evaluate", str(tmp_path / "missing"), "--zoo-dir", tiny_zoo)
    assert code == 2
