import pytest

from ripplerec.dataset import SynthConfig, generate_synthetic_dataset, load_dataset_dir


@pytest.fixture(scope="session")
def small_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(n_users=100, n_items=50, n_days=7, n_topics=5, seed=1)
    generate_synthetic_dataset(cfg, out)
    return out


@pytest.fixture(scope="session")
def small_bundle(small_dir):
    return load_dataset_dir(small_dir)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def record_criterion(request):
    """Store a one-line PASS/FAIL verdict, printed in the terminal summary."""
    def record(number, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
        request.config.acceptance_lines.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
