import pytest


def small_document(workdir, **sections):
    """A config that trains, extracts and evaluates in well under a second."""
    doc = {
        "project": "toy",
        "seed": 0,
        "workdir": str(workdir),
        "model": {"widths": [2, 8, 2]},
        "data": {"n_train": 24, "n_test": 8, "separation": 2.0},
        "train": {"epochs": 3, "batch_size": 8, "learning_rate": 0.05},
        "projection": {"k_in": 4, "k_out": 4},
        "store": {"batch_size": 10},
        "eval": {
            "methods": ["logra_random", "grad_dot", "rep_sim"],
            "subset_count": 4,
            "retrain_seeds": [0],
            "reference_models": 2,
            "removal_sizes": [0, 2],
            "brittleness_seeds": [0],
            "tracked_count": 3,
            "null_draws": 10,
        },
    }
    for name, values in sections.items():
        if isinstance(values, dict):
            doc[name] = {**doc.get(name, {}), **values}
        else:
            doc[name] = values
    return doc


@pytest.fixture
def doc(tmp_path, monkeypatch):
    monkeypatch.delenv("LOGRA_CACHE_DIR", raising=False)
    return small_document(tmp_path / "run")


_CRITERIA: dict[int, tuple[str, list[str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    _CRITERIA.setdefault(number, (title, []))[1].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[number]
        verdict = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title}")
