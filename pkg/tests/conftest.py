import pytest

from quadcsg import cli

# small enough to fit in about a second, large enough to give a non-empty sphere
FAST_FIT = ["--p", "16", "--c", "4", "--latent-size", "16", "--hidden", "32",
            "--iterations", "400", "--batch-size", "512", "--learning-rate", "3e-3",
            "--n-queries", "2048", "--resolution", "16", "--n-uniform-validation", "1024"]


@pytest.fixture(scope="session")
def sphere_voxels(tmp_path_factory):
    path = tmp_path_factory.mktemp("inputs") / "sphere.capv"
    assert cli.main(["synth", "--shape", "sphere", "--out", str(path), "--resolution", "16"]) == 0
    return path


@pytest.fixture(scope="session")
def fast_run(tmp_path_factory, sphere_voxels):
    """Output directory of one small reconstruction, shared by the CLI tests."""
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["reconstruct", "--input", str(sphere_voxels), "--input-type", "voxel",
                     "--out-dir", str(out), "--seed", "0", *FAST_FIT])
    assert code == 0
    return out
