import textwrap

import pytest

from adseg.features import DEFAULT_CATEGORIES, AppCatalog

# Eight-row reference log. Row 7 carries a malformed "6:75pm" timestamp.
REFERENCE_LOG_CSV = textwrap.dedent("""\
    user,apps,ts,stage,advert,publisher,site
    U7,entertainment1|finance5|finance67|lifestyle78,03/05/2014 8:00pm,Impression,Advert1,Pub6,Site2
    U7,entertainment1|finance5|finance67|lifestyle78,05/05/2014 4:03pm,Impression,Advert4,Pub2,Site1
    U7,entertainment1|finance5|finance67|lifestyle78,05/05/2014 4:03pm,Tap,Advert4,Pub2,Site1
    U7,entertainment1|finance5|finance67|lifestyle78,05/05/2014 4:04pm,Load Video,Advert4,Pub2,Site1
    U7,entertainment1|finance5|finance67|lifestyle78,05/05/2014 4:04pm,Play Video,Advert4,Pub2,Site1
    U7,entertainment1|finance5|finance67|lifestyle78,05/05/2014 4:05pm,25% Video,Advert4,Pub2,Site1
    U7,entertainment1|finance5|finance67,15/06/2014 6:75pm,Impression,Advert1,Pub6,Site2
    U23,finance1|entertainment34|entertainment33|finance4|lifestyles3|entertainment6,21/06/2014 2:18am,Impression,Advert4,Pub4,Site1
    """)

# same rows with row 7 given a valid evening time so the dedup rule can be exercised
REFERENCE_LOG_VALID_CSV = REFERENCE_LOG_CSV.replace("15/06/2014 6:75pm", "15/06/2014 6:45pm")

REFERENCE_LOG_REGISTRY = {"Advert1": "finance", "Advert4": "lifestyle"}


def _reference_catalog() -> AppCatalog:
    apps = {}
    for cat in DEFAULT_CATEGORIES:
        slug = "".join(ch for ch in cat if ch.isalnum())
        for j in range(1, 40):
            apps[f"{slug}{j}"] = DEFAULT_CATEGORIES.index(cat)
    # the reference log spells this app's category "lifestyle"
    apps["lifestyle78"] = DEFAULT_CATEGORIES.index("lifestyles")
    apps["finance67"] = DEFAULT_CATEGORIES.index("finance")
    return AppCatalog(tuple(DEFAULT_CATEGORIES), apps)


@pytest.fixture
def catalog() -> AppCatalog:
    return _reference_catalog()


@pytest.fixture
def reference_log_lines():
    return REFERENCE_LOG_VALID_CSV.splitlines()


@pytest.fixture
def write_catalog_file(tmp_path):
    def _write(rows, name="catalog.tsv"):
        p = tmp_path / name
        p.write_text("".join(f"{a}\t{c}\n" for a, c in rows))
        return p
    return _write


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
