import pytest

from ccq import CcqConfig, train


@pytest.fixture
def report(capsys):
    """Print one line straight to the terminal, bypassing capture."""

    def emit(line: str) -> None:
        with capsys.disabled():
            print(line)

    return emit


@pytest.fixture(scope="session")
def small_model():
    """A quickly trained two-modality model on clustered data."""
    from ccq.io import generate_synthetic

    data = generate_synthetic(clusters=6, per_cluster=60, dims=(20, 28), noise=0.4, seed=1)
    cfg = CcqConfig(num_codebooks=3, codewords_per_book=16, max_outer_iters=8, seed=1)
    model, codes = train(data, cfg)
    return model, codes, data
