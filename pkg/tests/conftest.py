import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trilogy.ontology import seed_ontology  # noqa: E402
from trilogy.soif import SoifRecord  # noqa: E402

ALTL = "Adaptation Layer And Transport Layer"


@pytest.fixture
def seed():
    return seed_ontology()


def doc(url, title="", keywords="", abstract=""):
    return SoifRecord("FILE", url, (
        ("title", title.encode()), ("keywords", keywords.encode()), ("abstract", abstract.encode())))


# -- acceptance reporting ---------------------------------------------------------

ACCEPTANCE_RESULTS: dict = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" in props and (report.when == "call" or report.failed):
        status = "PASS" if report.passed else "FAIL"
        detail = props.get("detail", "")
        prior = ACCEPTANCE_RESULTS.get(props["criterion"])
        if prior is not None:  # parametrized criteria: any failing case fails the criterion
            status = "FAIL" if "FAIL" in (status, prior[0]) else "PASS"
            detail = "; ".join(d for d in (prior[2], detail) if d)
        ACCEPTANCE_RESULTS[props["criterion"]] = (status, props.get("label", ""), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        status, label, detail = ACCEPTANCE_RESULTS[number]
        line = f"criterion {number:>2} {status}  {label}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture
def criterion(record_property):
    """``criterion(n, label)`` tags the running test; ``.detail(text)`` attaches a measurement."""

    class Tag:
        def __call__(self, number, label):
            record_property("criterion", number)
            record_property("label", label)
            return self

        def detail(self, text):
            record_property("detail", text)

    return Tag()
