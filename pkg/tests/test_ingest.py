import json
import random
from datetime import datetime

import pytest
from hypothesis import given, settings, strategies as st

from adseg.ingest import (
    EmptyUserId, FirstOccurrenceStore, InteractionRecord, InteractionStage, InvalidTimestamp,
    MalformedLine, OutsideStudyWindow, UnknownStage, dedup_first, ingest_files, iter_records,
    load_registry, parse_record, parse_timestamp, read_log, store_as_stream,
)

from conftest import REFERENCE_LOG_CSV, REFERENCE_LOG_VALID_CSV


def _row(line):
    return parse_record(line, "csv")


def test_reference_log_row_1_parses():
    rec = _row(REFERENCE_LOG_CSV.splitlines()[1])
    assert rec.user_id == "U7"
    assert rec.app_list == {"entertainment1", "finance5", "finance67", "lifestyle78"}
    assert rec.timestamp == datetime(2014, 5, 3, 20, 0)
    assert rec.stage is InteractionStage.IMPRESSION
    assert (rec.advert, rec.publisher, rec.site) == ("Advert1", "Pub6", "Site2")


def test_reference_log_row_7_minute_75_rejected():
    with pytest.raises(InvalidTimestamp) as exc:
        parse_record(REFERENCE_LOG_CSV.splitlines()[7], "csv", lineno=8)
    assert exc.value.line == 8 and exc.value.field == "ts"
    assert "line 8" in str(exc.value)


def test_empty_app_list_is_valid():
    rec = _row("U1,,2014-05-03T20:00,Impression,Advert1,Pub1,Site1")
    assert rec.app_list == frozenset()


def test_duplicate_apps_collapse():
    rec = parse_record(json.dumps({"user": "u", "apps": ["a", "b", "a"], "ts": "2014-05-03T20:00",
                                   "stage": "tap", "advert": "Ad", "publisher": "p", "site": "s"}))
    assert rec.app_list == {"a", "b"}


@pytest.mark.parametrize("line,err", [
    ("U1,a,2014-05-03T20:00,Impression,Advert1,Pub1", MalformedLine),
    (",a,2014-05-03T20:00,Impression,Advert1,Pub1,Site1", EmptyUserId),
    ("U1,a,2014-05-03T24:00,Impression,Advert1,Pub1,Site1", InvalidTimestamp),
    ("U1,a,2014-02-30T10:00,Impression,Advert1,Pub1,Site1", InvalidTimestamp),
    ("U1,a,2014-05-03T20:00,Swipe,Advert1,Pub1,Site1", UnknownStage),
])
def test_csv_errors(line, err):
    with pytest.raises(err):
        _row(line)


def test_bad_json_is_malformed():
    with pytest.raises(MalformedLine):
        parse_record("{not json", "jsonl")
    with pytest.raises(MalformedLine):
        parse_record(json.dumps({"user": "u"}), "jsonl")


@pytest.mark.parametrize("text,expected", [
    ("2014-05-03T20:00", datetime(2014, 5, 3, 20, 0)),
    ("03/05/2014 8:00pm", datetime(2014, 5, 3, 20, 0)),
    ("21/06/2014 2:18am", datetime(2014, 6, 21, 2, 18)),
    ("01/06/2014 12:05am", datetime(2014, 6, 1, 0, 5)),
    ("01/06/2014 12:05pm", datetime(2014, 6, 1, 12, 5)),
])
def test_timestamp_forms(text, expected):
    assert parse_timestamp(text) == expected


@pytest.mark.parametrize("name,stage", [
    ("impression", InteractionStage.IMPRESSION), ("TAP", InteractionStage.TAP),
    ("Load Video", InteractionStage.LOAD_VIDEO), ("playvideo", InteractionStage.PLAY_VIDEO),
    ("25% Video", InteractionStage.VIDEO_25), ("VideoComplete", InteractionStage.VIDEO_COMPLETE),
    ("video100", InteractionStage.VIDEO_COMPLETE),
])
def test_stage_names(name, stage):
    assert InteractionStage.parse(name) is stage


def test_stage_order_is_funnel_order():
    assert max(InteractionStage) is InteractionStage.VIDEO_COMPLETE
    assert sorted(InteractionStage) == list(InteractionStage)


def test_window_check():
    window = (datetime(2014, 5, 2), datetime(2014, 6, 22, 23, 59))
    with pytest.raises(OutsideStudyWindow):
        parse_record("U1,a,2014-07-01T10:00,Tap,Ad,P,S", "csv", window=window)


def test_reference_log_dedup_keeps_earliest_impression(reference_log_lines):
    store = dedup_first(iter_records(reference_log_lines, "csv"))
    kept = store.get("U7", "Advert1", InteractionStage.IMPRESSION)
    assert kept.timestamp == datetime(2014, 5, 3, 20, 0)
    assert len(store) == 7
    # the later record's shorter app list does not shrink the union
    assert store.user_apps["U7"] == {"entertainment1", "finance5", "finance67", "lifestyle78"}


def test_empty_stream():
    store = dedup_first([])
    assert len(store) == 0 and not store.user_apps


def _fixture_records(n=50, seed=3):
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        out.append(InteractionRecord(
            f"u{rng.randint(1, 4)}", frozenset(rng.sample("abcdefg", rng.randint(0, 3))),
            datetime(2014, 5, rng.randint(2, 4), rng.randint(0, 23), rng.choice([0, 30])),
            InteractionStage(rng.randint(0, 2)), f"Ad{rng.randint(1, 2)}",
            f"Pub{rng.randint(1, 2)}", "Site1"))
    return out


def _brute_force_store(records):
    """Earliest record per key found by scanning every candidate."""
    keys = {r.key for r in records}
    best = {}
    for key in keys:
        cands = [r for r in records if r.key == key]
        best[key] = min(cands, key=InteractionRecord.sort_key)
    apps = {}
    for r in records:
        apps.setdefault(r.user_id, set()).update(r.app_list)
    return best, apps


def test_dedup_matches_brute_force_and_is_order_free():
    recs = _fixture_records()
    best, apps = _brute_force_store(recs)
    reference = dedup_first(recs)
    assert reference.records == best
    assert dict(reference.user_apps) == apps
    rng = random.Random(0)
    for _ in range(200):
        shuffled = recs[:]
        rng.shuffle(shuffled)
        assert dedup_first(shuffled) == reference


def test_idempotence_and_conservation():
    recs = _fixture_records()
    store = dedup_first(recs)
    assert dedup_first(store_as_stream(store)) == store
    assert len(store) == len({r.key for r in recs})


def test_merge_equals_dedup_of_concatenation():
    recs = _fixture_records(80, seed=9)
    a, b = dedup_first(recs[:37]), dedup_first(recs[37:])
    assert a.merge(b) == dedup_first(recs)
    assert b.merge(a) == dedup_first(recs)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 1), st.integers(0, 3),
                          st.integers(0, 5), st.sets(st.sampled_from("xyz"))), max_size=30),
       st.randoms(use_true_random=False))
def test_app_union_monotone_and_order_free(rows, rnd):
    recs = [InteractionRecord(f"u{u}", frozenset(apps), datetime(2014, 5, 2, h), InteractionStage(s),
                              f"A{a}") for u, a, s, h, apps in rows]
    store = FirstOccurrenceStore()
    sizes = {}
    for r in recs:
        store.add(r)
        for user, apps in store.user_apps.items():
            assert len(apps) >= sizes.get(user, 0)
            sizes[user] = len(apps)
    shuffled = recs[:]
    rnd.shuffle(shuffled)
    assert dedup_first(shuffled) == store


def test_lenient_skips_and_counts():
    from adseg.ingest import ParseStats
    stats = ParseStats()
    recs = list(iter_records(REFERENCE_LOG_CSV.splitlines(), "csv", lenient=True, stats=stats))
    assert len(recs) == 7 and stats.skipped == 1
    assert "field 'ts'" in stats.errors[0]


def test_strict_mode_raises_on_bad_line():
    with pytest.raises(InvalidTimestamp):
        list(iter_records(REFERENCE_LOG_CSV.splitlines(), "csv"))


def test_csv_header_required():
    with pytest.raises(MalformedLine):
        list(iter_records(REFERENCE_LOG_VALID_CSV.splitlines()[1:], "csv"))


def test_funnel_report_flags_but_keeps_lossy_funnels():
    recs = [InteractionRecord("u1", frozenset(), datetime(2014, 5, 2, 10), InteractionStage.TAP, "A")]
    store = dedup_first(recs)
    assert len(store) == 1
    assert store.funnel_report()["A"]["violations"] == ["Tap"]


def test_store_roundtrip(tmp_path, reference_log_lines):
    store = dedup_first(iter_records(reference_log_lines, "csv"))
    store.save(tmp_path / "s.jsonl", seed=1)
    assert FirstOccurrenceStore.load(tmp_path / "s.jsonl") == store


def test_sharded_ingest_matches_single(tmp_path, reference_log_lines):
    header, rows = reference_log_lines[0], reference_log_lines[1:]
    (tmp_path / "a.csv").write_text("\n".join([header] + rows[:4]) + "\n")
    (tmp_path / "b.csv").write_text("\n".join([header] + rows[4:]) + "\n")
    store, stats = ingest_files([tmp_path / "a.csv", tmp_path / "b.csv"])
    assert store == dedup_first(iter_records(reference_log_lines, "csv"))
    assert stats.parsed == 8


def test_registry(tmp_path):
    p = tmp_path / "reg.tsv"
    p.write_text("Advert1\tfinance\nAdvert4\tLifestyle\n")
    reg = load_registry(p)
    assert reg["Advert4"].value == "lifestyle"
    p.write_text("Advert1\tsports\n")
    with pytest.raises(ValueError):
        load_registry(p)


def test_unregistered_advert_is_a_line_error(tmp_path, reference_log_lines):
    p = tmp_path / "t.csv"
    p.write_text("\n".join(reference_log_lines) + "\n")
    with pytest.raises(MalformedLine):
        list(read_log(p, registry={"Advert1": "finance"}))
