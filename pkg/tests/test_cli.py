import json
from pathlib import Path

import numpy as np
import pytest

import mra
import mrc_io
import numcore
from commands.base_command import MANIFEST, DIAGNOSTIC, BaseCommand
from commands.command_factory import CommandFactory
from config import RunConfig, SimulateMraParams
from errors import ArtifactError, NumericalError
from main import run

COMMANDS = {
    "simulate-mra", "moments-mra", "invert-spectral", "make-dataset", "train-encoder", "recon-mra",
    "fit-volume", "simulate-cryoem", "moments-cryoem", "recon-cryoem", "eval-fsc", "eval-error",
}


def run_command(tmp_path: Path, command: str, params: dict, out: Path, *flags: str) -> int:
    path = tmp_path / f"{command}.json"
    path.write_text(json.dumps(params))
    return run([command, "--config", str(path), "--out", str(out), "--quiet", *flags])


def printed_result(capsys) -> dict:
    return json.loads(capsys.readouterr().out)


# ==================== FACTORY ====================

def test_factory_discovers_every_command(factory):
    assert set(CommandFactory.get_available_commands()) == COMMANDS
    categories = CommandFactory.get_commands_by_category()
    assert set(categories) == {"mra", "cryoem", "evaluation"}
    assert categories["evaluation"] == ["eval-error", "eval-fsc"]


def test_factory_rejects_unknown_commands(factory):
    with pytest.raises(ValueError, match="not found"):
        CommandFactory.create("reconstruct-everything")


def test_every_command_declares_parameters(factory):
    for command_id in COMMANDS:
        command = CommandFactory.create(command_id)
        assert command.name == command_id
        assert command.params_class is not None
        assert command.get_description()


def test_list(factory, capsys):
    assert run(["list"]) == 0
    out = capsys.readouterr().out
    assert "AVAILABLE COMMANDS" in out
    for command_id in COMMANDS:
        assert command_id in out


def test_list_describes_one_command(factory, capsys):
    assert run(["list", "recon-mra"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("recon-mra")
    assert "writes: z_v.omt, signal.omt" in out
    assert run(["list", "reconstruct-everything"]) == 1
    assert CommandFactory.get_command_class("reconstruct-everything") is None


def test_every_command_declares_its_outputs(factory):
    for command_id in COMMANDS:
        command_class = CommandFactory.get_command_class(command_id)
        assert command_class is type(CommandFactory.create(command_id))
        assert command_class().get_outputs()
    simulate = CommandFactory.create("simulate-cryoem")
    moments_only = simulate.params_class(moments_only=True)
    assert "m1.omt" in simulate.get_outputs(moments_only)
    assert "images.omt" not in simulate.get_outputs(moments_only)


# ==================== MRA PIPELINE ====================

def test_simulate_then_estimate_moments(factory, tmp_path, capsys):
    sim = tmp_path / "sim"
    code = run_command(tmp_path, "simulate-mra",
                       {"n": 7, "observations": 400, "sigma": 0.5, "seed": 3}, sim)
    assert code == 0
    result = printed_result(capsys)
    assert result["command"] == "simulate-mra"
    assert result["summary"]["observations"] == 400
    rows, meta = numcore.read_tensor(sim / "observations.omt")
    assert rows.shape == (400, 7) and meta["sigma"] == 0.5
    density, _ = numcore.read_tensor(sim / "density.omt")
    assert np.isclose(density.sum(), 1.0)

    moments_dir = tmp_path / "moments"
    code = run_command(tmp_path, "moments-mra", {"observations": str(sim / "observations.omt")}, moments_dir)
    assert code == 0
    pair = mra.load_moments(moments_dir)
    assert pair.n == 7 and pair.count == 400 and pair.sigma == 0.5
    assert np.allclose(pair.m2, pair.m2.conj().T)


def test_simulation_is_reproducible_across_worker_counts(factory, tmp_path, capsys):
    params = {"n": 9, "observations": 300, "sigma": 1.0}
    assert run_command(tmp_path, "simulate-mra", params, tmp_path / "a", "--workers", "1") == 0
    assert run_command(tmp_path, "simulate-mra", params, tmp_path / "b", "--workers", "3") == 0
    for name in ("signal.omt", "density.omt", "observations.omt", "shifts.omt"):
        assert numcore.content_hash(tmp_path / "a" / name) == numcore.content_hash(tmp_path / "b" / name)


def test_invert_spectral_from_disk(factory, tmp_path, capsys):
    n = 7
    a = np.random.default_rng(1).uniform(-np.pi, np.pi, n)
    signal = mra.MraSignal.from_fourier(np.exp(1j * (a - a[numcore.negated_index(n)])))
    density = mra.MraDensity(np.arange(1.0, n + 1) / np.arange(1.0, n + 1).sum())
    moments_dir, truth = tmp_path / "moments", tmp_path / "truth"
    mra.save_moments(mra.analytic_moments(signal, density), moments_dir)
    numcore.write_tensor(truth / "signal.omt", signal.values_real)
    numcore.write_tensor(truth / "density.omt", density.mass)

    out = tmp_path / "inverted"
    code = run_command(tmp_path, "invert-spectral", {"moments": str(moments_dir), "truth": str(truth)}, out)
    assert code == 0
    summary = printed_result(capsys)["summary"]
    assert summary["signal_rel_err"] < 1e-8
    assert summary["density_rel_err"] < 1e-8
    eigenvalues, _ = numcore.read_tensor(out / "eigenvalues.omt")
    assert np.isclose(eigenvalues.sum(), n)


def test_eval_error_of_a_signal_against_itself(factory, tmp_path, capsys):
    path = tmp_path / "signal.omt"
    numcore.write_tensor(path, np.cos(np.arange(8.0)))
    code = run_command(tmp_path, "eval-error",
                       {"kind": "signal", "reference": str(path), "estimate": str(path)}, tmp_path / "err")
    assert code == 0
    assert json.loads((tmp_path / "err" / "error.json").read_text())["relative_error"] == pytest.approx(0.0)


# ==================== VOLUMES ====================

def blob(n: int) -> np.ndarray:
    p = numcore.pixel_offsets(n)
    z, y, x = np.meshgrid(p, p, p, indexing="ij")
    return np.exp(-((x - 1.0) ** 2 + y ** 2 + (z + 0.5) ** 2) / 4.0) + 0.5 * np.exp(-(x ** 2 + (y - 2.0) ** 2 + z ** 2) / 2.0)


@pytest.mark.parametrize("align", [False, True])
def test_fsc_of_identical_volumes_reaches_nyquist(factory, tmp_path, capsys, align):
    path = mrc_io.save_mrc(tmp_path / "map.mrc", blob(9), voxel_size=1.5)
    out = tmp_path / "fsc"
    params = {"reference": str(path), "estimate": str(path), "align": align, "q1": 4, "q2": 2}
    assert run_command(tmp_path, "eval-fsc", params, out) == 0
    resolution = json.loads((out / "resolution.json").read_text())
    assert resolution["nyquist"] == pytest.approx(3.0)
    assert resolution["resolution"] == pytest.approx(resolution["nyquist"])
    if align:
        assert resolution["alignment_error"] == pytest.approx(0.0, abs=1e-12)
    frame = (out / "fsc.csv").read_text().splitlines()
    assert len(frame) > 1


def test_eval_fsc_rejects_different_sizes(factory, tmp_path, capsys):
    a = mrc_io.save_mrc(tmp_path / "a.mrc", blob(9))
    b = mrc_io.save_mrc(tmp_path / "b.mrc", blob(7))
    assert run_command(tmp_path, "eval-fsc", {"reference": str(a), "estimate": str(b)}, tmp_path / "o") == 2


# ==================== MANIFESTS AND FAILURES ====================

def test_manifest_records_hashes(factory, tmp_path, capsys):
    sim = tmp_path / "sim"
    assert run_command(tmp_path, "simulate-mra", {"n": 5, "observations": 50}, sim, "--seed", "7") == 0
    manifest = json.loads((sim / MANIFEST).read_text())
    assert manifest["seed"] == 7
    assert manifest["command"] == "simulate-mra"
    assert manifest["params"]["n"] == 5
    assert manifest["version"]
    assert len(manifest["outputs"]) == 4
    for path, digest in manifest["outputs"].items():
        assert numcore.content_hash(Path(path)) == digest
    assert printed_result(capsys)["manifest"] == str(sim / MANIFEST)

    out = tmp_path / "moments"
    assert run_command(tmp_path, "moments-mra", {"observations": str(sim / "observations.omt")}, out) == 0
    manifest = json.loads((out / MANIFEST).read_text())
    assert list(manifest["inputs"]) == [str(sim / "observations.omt")]


def test_invalid_field_exits_with_one(factory, tmp_path, capsys):
    assert run_command(tmp_path, "simulate-mra", {"n": 2}, tmp_path / "o") == 1
    err = capsys.readouterr().err
    assert "$.n" in err and "must be >= 3" in err


def test_missing_input_exits_with_two(factory, tmp_path, capsys):
    params = {"observations": str(tmp_path / "nowhere.omt")}
    assert run_command(tmp_path, "moments-mra", params, tmp_path / "o") == 2
    assert "does not exist" in capsys.readouterr().err


def test_precondition_violation_exits_with_one(factory, tmp_path, capsys):
    n = 5
    signal = mra.MraSignal(np.array([1.0, 0.2, 0.0, -0.3, 0.5]))
    moments_dir = tmp_path / "moments"
    mra.save_moments(mra.analytic_moments(signal, mra.MraDensity.uniform(n)), moments_dir)
    assert run_command(tmp_path, "invert-spectral", {"moments": str(moments_dir)}, tmp_path / "o") == 1


class Diverging(BaseCommand):
    params_class = SimulateMraParams

    def get_name(self) -> str:
        return "diverging"

    def get_description(self) -> str:
        return "always fails"

    def run(self, ctx):
        raise NumericalError("loss is nan", {"epoch": 4})


def test_numerical_failure_leaves_a_diagnostic(tmp_path):
    cfg = RunConfig("diverging", SimulateMraParams(), out_dir=tmp_path)
    with pytest.raises(NumericalError):
        Diverging().execute(cfg)
    diagnostic = json.loads((tmp_path / DIAGNOSTIC).read_text())
    assert diagnostic["diagnostics"] == {"epoch": 4}
    assert diagnostic["message"] == "loss is nan"
    assert not (tmp_path / MANIFEST).exists()


class Forgetful(BaseCommand):
    params_class = SimulateMraParams

    def get_name(self) -> str:
        return "forgetful"

    def get_description(self) -> str:
        return "declares two files, writes one"

    def get_outputs(self, params=None) -> list[str]:
        return ["signal.omt", "density.omt"]

    def run(self, ctx):
        ctx.write_tensor("signal.omt", np.zeros(3))
        return {}


def test_missing_declared_output_is_an_artifact_error(tmp_path):
    cfg = RunConfig("forgetful", SimulateMraParams(), out_dir=tmp_path)
    with pytest.raises(ArtifactError, match="density.omt"):
        Forgetful().execute(cfg)
    assert (tmp_path / "signal.omt").exists()
    assert not (tmp_path / MANIFEST).exists()
