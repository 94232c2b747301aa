import json
from pathlib import Path

import pytest

from taxoguide.llm import LLMClient, ResponseCache, ScriptedProvider
from taxoguide.mock import MockLLM
from taxoguide.taxonomy import Taxonomy, TaxonomyEntity, load_taxonomy, parse_soc_code

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"
TEST_DATA = Path(__file__).resolve().parent / "data"
ONET_PATH = DATA / "onet" / "occupation_data_2019.txt"
ESCO_PATH = DATA / "esco" / "skills_v1.2.csv.gz"
FIGURES = TEST_DATA / "figures"


@pytest.fixture(scope="session")
def onet():
    return load_taxonomy(ONET_PATH, "onet")


@pytest.fixture(scope="session")
def esco():
    return load_taxonomy(ESCO_PATH, "esco")


def occupation(code, title, description="Do the work."):
    return TaxonomyEntity(code, title, description, "occupation", parse_soc_code(code))


@pytest.fixture(scope="session")
def tiny_onet():
    """Nine occupations over three major groups."""
    rows = [
        ("11-1011.00", "Chief Executives", "Determine and formulate policies."),
        ("11-1021.00", "General and Operations Managers", "Plan, direct, or coordinate operations."),
        ("11-2011.00", "Advertising and Promotions Managers", "Plan and direct advertising policies."),
        ("15-1252.00", "Software Developers", "Research, design, and develop computer software."),
        ("15-2011.00", "Actuaries", "Analyze statistical data to estimate risk."),
        ("15-2051.00", "Data Scientists", "Develop and implement methods to analyze data."),
        ("29-1141.00", "Registered Nurses", "Assess patient health problems and needs."),
        ("29-2061.00", "Licensed Practical and Licensed Vocational Nurses", "Care for ill patients."),
        ("29-1228.00", "Physicians, All Other", "Diagnose and treat illness."),
    ]
    return Taxonomy.from_entities("tiny-onet", [occupation(*r) for r in rows])


def figure(name: str) -> str:
    text = (FIGURES / name).read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def mock_client(taxonomy, seed=0, **kw):
    return LLMClient(ScriptedProvider(MockLLM(taxonomy, seed=seed, **kw)), ResponseCache(), sleep=lambda s: None, seed=seed)


def read_jsonl(path):
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record_criterion(number: int, passed: bool | None, detail: str) -> None:
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    ACCEPTANCE[number] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
