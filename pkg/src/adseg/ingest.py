"""Interaction log parsing and first-occurrence reduction."""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import json
import logging
import re
import sys
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Iterator

from .errors import AdsegError, DataError

log = logging.getLogger(__name__)


class InteractionStage(enum.IntEnum):
    IMPRESSION = 0
    TAP = 1
    LOAD_VIDEO = 2
    PLAY_VIDEO = 3
    VIDEO_25 = 4
    VIDEO_50 = 5
    VIDEO_75 = 6
    VIDEO_COMPLETE = 7

    @property
    def canonical(self) -> str:
        return _CANONICAL[self]

    @property
    def item(self) -> str:
        """Basket item name for this stage."""
        return _ITEMS[self]

    @classmethod
    def parse(cls, name: str) -> "InteractionStage":
        key = re.sub(r"[\s_\-]", "", name).lower()
        try:
            return _STAGE_LOOKUP[key]
        except KeyError:
            raise UnknownStage(f"unknown interaction stage {name!r}", field="stage") from None


_CANONICAL = {
    InteractionStage.IMPRESSION: "Impression",
    InteractionStage.TAP: "Tap",
    InteractionStage.LOAD_VIDEO: "LoadVideo",
    InteractionStage.PLAY_VIDEO: "PlayVideo",
    InteractionStage.VIDEO_25: "Video25",
    InteractionStage.VIDEO_50: "Video50",
    InteractionStage.VIDEO_75: "Video75",
    InteractionStage.VIDEO_COMPLETE: "VideoComplete",
}
_ITEMS = {
    InteractionStage.IMPRESSION: "impression",
    InteractionStage.TAP: "tap",
    InteractionStage.LOAD_VIDEO: "loadvideo",
    InteractionStage.PLAY_VIDEO: "playvideo",
    InteractionStage.VIDEO_25: "video25",
    InteractionStage.VIDEO_50: "video50",
    InteractionStage.VIDEO_75: "video75",
    InteractionStage.VIDEO_COMPLETE: "video100",
}
_STAGE_LOOKUP: dict[str, InteractionStage] = {}
for _stage in InteractionStage:
    _STAGE_LOOKUP[_CANONICAL[_stage].lower()] = _stage
    _STAGE_LOOKUP[_ITEMS[_stage]] = _stage
# spellings used in raw ad-server exports
_STAGE_LOOKUP.update({
    "25%video": InteractionStage.VIDEO_25,
    "50%video": InteractionStage.VIDEO_50,
    "75%video": InteractionStage.VIDEO_75,
    "video25%": InteractionStage.VIDEO_25,
    "video50%": InteractionStage.VIDEO_50,
    "video75%": InteractionStage.VIDEO_75,
    "completevideo": InteractionStage.VIDEO_COMPLETE,
    "video100%": InteractionStage.VIDEO_COMPLETE,
})

STAGES = tuple(InteractionStage)
POST_IMPRESSION_STAGES = STAGES[1:]


class AdGenre(str, enum.Enum):
    FINANCE = "finance"
    LIFESTYLE = "lifestyle"
    ENTERTAINMENT = "entertainment"

    @classmethod
    def parse(cls, name: str) -> "AdGenre":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise DataError(f"unknown genre {name!r}") from None


GENRES = tuple(AdGenre)


# -- errors ------------------------------------------------------------------

class ParseError(DataError):
    """A log line could not be turned into a record."""

    def __init__(self, message: str, *, field: str | None = None, line: int | None = None):
        super().__init__(message)
        self.field = field
        self.line = line

    def __str__(self) -> str:
        where = []
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.field is not None:
            where.append(f"field {self.field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        return prefix + self.args[0]


class MalformedLine(ParseError):
    pass


class InvalidTimestamp(ParseError):
    pass


class UnknownStage(ParseError):
    pass


class EmptyUserId(ParseError):
    pass


class EmptyAdvert(ParseError):
    pass


class OutsideStudyWindow(ParseError):
    pass


class UnregisteredAdvert(DataError):
    pass


# -- records -----------------------------------------------------------------

@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    app_list: frozenset[str]
    timestamp: datetime
    stage: InteractionStage
    advert: str
    publisher: str = ""
    site: str = ""

    @property
    def key(self) -> tuple[str, str, InteractionStage]:
        return (self.user_id, self.advert, self.stage)

    def sort_key(self) -> tuple:
        # total order used to resolve timestamp ties without depending on input order
        return (self.timestamp, self.publisher, self.site, tuple(sorted(self.app_list)))

    def to_json(self) -> dict:
        return {
            "user": self.user_id,
            "apps": sorted(self.app_list),
            "ts": format_timestamp(self.timestamp),
            "stage": self.stage.canonical,
            "advert": self.advert,
            "publisher": self.publisher,
            "site": self.site,
        }


_ISO_RE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})[T ](\d{1,2}):(\d{2})$")
_COMPAT_RE = re.compile(r"^(\d{1,2})/(\d{1,2})/(\d{4})\s+(\d{1,2}):(\d{2})\s*([ap]m)$", re.I)


def parse_timestamp(text: str) -> datetime:
    """Parse ``YYYY-MM-DDTHH:MM`` or the legacy ``dd/mm/yyyy h:mmam`` form."""
    text = text.strip()
    m = _ISO_RE.match(text)
    if m:
        year, month, day, hour, minute = (int(g) for g in m.groups())
    else:
        m = _COMPAT_RE.match(text)
        if not m:
            raise InvalidTimestamp(f"unrecognised timestamp {text!r}", field="ts")
        day, month, year, hour12, minute = (int(g) for g in m.groups()[:5])
        if not 1 <= hour12 <= 12:
            raise InvalidTimestamp(f"hour out of range in {text!r}", field="ts")
        hour = hour12 % 12 + (12 if m.group(6).lower() == "pm" else 0)
    if not 0 <= hour <= 23:
        raise InvalidTimestamp(f"hour out of range in {text!r}", field="ts")
    if not 0 <= minute <= 59:
        raise InvalidTimestamp(f"minute out of range in {text!r}", field="ts")
    try:
        return datetime(year, month, day, hour, minute)
    except ValueError as exc:
        raise InvalidTimestamp(f"invalid date {text!r}: {exc}", field="ts") from None


def format_timestamp(ts: datetime) -> str:
    return ts.strftime("%Y-%m-%dT%H:%M")


CSV_COLUMNS = ("user", "apps", "ts", "stage", "advert", "publisher", "site")


def _split_apps(value: str, sep: str) -> frozenset[str]:
    return frozenset(sys.intern(a.strip()) for a in value.split(sep) if a.strip())


def _build(user, apps, ts, stage, advert, publisher, site, window) -> InteractionRecord:
    if not isinstance(user, str) or not user.strip():
        raise EmptyUserId("user id is empty", field="user")
    if not isinstance(advert, str) or not advert.strip():
        raise EmptyAdvert("advert is empty", field="advert")
    if not isinstance(ts, str):
        raise InvalidTimestamp("timestamp must be a string", field="ts")
    if not isinstance(stage, str):
        raise UnknownStage("stage must be a string", field="stage")
    timestamp = parse_timestamp(ts)
    if window is not None:
        start, end = window
        if (start is not None and timestamp < start) or (end is not None and timestamp > end):
            raise OutsideStudyWindow(f"{format_timestamp(timestamp)} outside study window", field="ts")
    return InteractionRecord(
        user_id=user.strip(),
        app_list=apps,
        timestamp=timestamp,
        stage=InteractionStage.parse(stage),
        advert=advert.strip(),
        publisher=str(publisher or "").strip(),
        site=str(site or "").strip(),
    )


def parse_record(line: str, format: str = "jsonl", *, lineno: int | None = None,
                 window: tuple[datetime | None, datetime | None] | None = None) -> InteractionRecord:
    """Parse one log line. CSV lines must not be the header row."""
    try:
        if format == "jsonl":
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(f"bad JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise MalformedLine("JSON line is not an object")
            missing = [c for c in ("user", "ts", "stage", "advert") if c not in obj]
            if missing:
                raise MalformedLine(f"missing keys {missing}", field=missing[0])
            apps = obj.get("apps") or []
            if isinstance(apps, str):
                apps = _split_apps(apps, "|")
            elif isinstance(apps, list) and all(isinstance(a, str) for a in apps):
                apps = frozenset(sys.intern(a.strip()) for a in apps if a.strip())
            else:
                raise MalformedLine("apps must be a list of strings", field="apps")
            return _build(obj["user"], apps, obj["ts"], obj["stage"], obj["advert"],
                          obj.get("publisher"), obj.get("site"), window)
        if format == "csv":
            rows = list(csv.reader(io.StringIO(line)))
            if len(rows) != 1 or len(rows[0]) != len(CSV_COLUMNS):
                n = len(rows[0]) if rows else 0
                raise MalformedLine(f"expected {len(CSV_COLUMNS)} columns, got {n}")
            user, apps, ts, stage, advert, publisher, site = rows[0]
            return _build(user, _split_apps(apps, "|"), ts, stage, advert, publisher, site, window)
        raise ValueError(f"unsupported format {format!r}")
    except ParseError as exc:
        exc.line = lineno
        raise


@dataclass
class ParseStats:
    parsed: int = 0
    skipped: int = 0
    errors: list[str] = field(default_factory=list)


def _share_apps(rec: InteractionRecord, pool: dict) -> InteractionRecord:
    # a user's records usually repeat one app list; keep a single copy of it
    shared = pool.setdefault(rec.app_list, rec.app_list)
    return rec if shared is rec.app_list else dataclasses.replace(rec, app_list=shared)


def iter_records(lines: Iterable[str], format: str = "jsonl", *, lenient: bool = False,
                 stats: ParseStats | None = None, window=None,
                 registry: dict[str, AdGenre] | None = None) -> Iterator[InteractionRecord]:
    """Parse a stream of lines. Strict mode raises on the first bad line."""
    stats = stats if stats is not None else ParseStats()
    header_pending = format == "csv"
    pool: dict[frozenset, frozenset] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if header_pending:
            header_pending = False
            cols = [c.strip().lower() for c in next(csv.reader([line]))]
            if cols != list(CSV_COLUMNS):
                err = MalformedLine(f"CSV header must be {','.join(CSV_COLUMNS)}", line=lineno)
                if not lenient:
                    raise err
                stats.skipped += 1
                stats.errors.append(str(err))
            continue
        try:
            rec = parse_record(line, format, lineno=lineno, window=window)
            if registry is not None and rec.advert not in registry:
                raise MalformedLine(f"advert {rec.advert!r} not in registry", field="advert", line=lineno)
        except ParseError as exc:
            if not lenient:
                raise
            stats.skipped += 1
            stats.errors.append(str(exc))
            log.warning("skipping %s", exc)
            continue
        stats.parsed += 1
        yield _share_apps(rec, pool)


def read_log(path: str | Path, format: str | None = None, **kwargs) -> Iterator[InteractionRecord]:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    with open(path, encoding="utf-8") as fh:
        yield from iter_records(fh, format, **kwargs)


def load_registry(path: str | Path) -> dict[str, AdGenre]:
    """Read ``advert_id<TAB>genre`` lines."""
    registry: dict[str, AdGenre] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 2:
                raise DataError(f"registry line {lineno}: expected advert<TAB>genre")
            advert, genre = parts[0].strip(), AdGenre.parse(parts[1])
            if registry.get(advert, genre) != genre:
                raise DataError(f"registry line {lineno}: advert {advert!r} has two genres")
            registry[advert] = genre
    return registry


def write_registry(registry: dict[str, AdGenre], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for advert, genre in registry.items():
            fh.write(f"{advert}\t{AdGenre(genre).value}\n")


# -- first-occurrence store --------------------------------------------------

class FirstOccurrenceStore:
    """Earliest record per (user, advert, stage) plus each user's app union.

    Folding is commutative: the kept record is the minimum under
    ``InteractionRecord.sort_key``, so shards can be reduced independently and
    merged in any order.
    """

    def __init__(self):
        self.records: dict[tuple[str, str, InteractionStage], InteractionRecord] = {}
        self.user_apps: dict[str, frozenset[str]] = {}
        self.n_seen = 0

    def _union_apps(self, user: str, apps: frozenset[str]) -> None:
        cur = self.user_apps.get(user)
        if cur is None:
            self.user_apps[user] = apps
        elif not apps <= cur:
            self.user_apps[user] = cur | apps

    def add(self, rec: InteractionRecord) -> None:
        self.n_seen += 1
        self._union_apps(rec.user_id, rec.app_list)
        cur = self.records.get(rec.key)
        if cur is None or rec.sort_key() < cur.sort_key():
            self.records[rec.key] = rec

    def update(self, records: Iterable[InteractionRecord]) -> "FirstOccurrenceStore":
        for rec in records:
            self.add(rec)
        return self

    def merge(self, other: "FirstOccurrenceStore") -> "FirstOccurrenceStore":
        """Return a new store equal to dedup of both inputs' concatenation."""
        out = FirstOccurrenceStore()
        for store in (self, other):
            for user, apps in store.user_apps.items():
                out._union_apps(user, apps)
            for rec in store.records.values():
                cur = out.records.get(rec.key)
                if cur is None or rec.sort_key() < cur.sort_key():
                    out.records[rec.key] = rec
            out.n_seen += store.n_seen
        return out

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[InteractionRecord]:
        return iter(sorted(self.records.values(), key=lambda r: (r.user_id, r.advert, r.stage)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, FirstOccurrenceStore):
            return NotImplemented
        # per-record app lists are folded into user_apps, so events compare without them
        return (dict(self.user_apps) == dict(other.user_apps)
                and {k: r.sort_key()[:3] for k, r in self.records.items()}
                == {k: r.sort_key()[:3] for k, r in other.records.items()})

    def get(self, user: str, advert: str, stage: InteractionStage) -> InteractionRecord | None:
        return self.records.get((user, advert, stage))

    @property
    def users(self) -> list[str]:
        return sorted(self.user_apps)

    def adverts(self) -> list[str]:
        return sorted({k[1] for k in self.records})

    def funnel_report(self) -> dict[str, dict]:
        """Per-advert stage counts and any stage that outnumbers its predecessor.

        Diagnostic only; lossy logs can legitimately break funnel monotonicity.
        """
        counts: dict[str, list[int]] = defaultdict(lambda: [0] * len(STAGES))
        for user, advert, stage in self.records:
            counts[advert][stage] += 1
        report = {}
        for advert in sorted(counts):
            c = counts[advert]
            violations = [STAGES[s].canonical for s in range(1, len(STAGES)) if c[s] > c[s - 1]]
            report[advert] = {
                "counts": {STAGES[s].canonical: c[s] for s in range(len(STAGES))},
                "violations": violations,
            }
        return report

    # persistence: one JSON object per line, users first then events
    def save(self, path: str | Path, *, seed: int | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "header", "format": "adseg-store", "version": 1,
                                 "seed": seed, "n_seen": self.n_seen}) + "\n")
            for user in self.users:
                fh.write(json.dumps({"type": "user", "user": user,
                                     "apps": sorted(self.user_apps[user])}) + "\n")
            for rec in self:
                fh.write(json.dumps({"type": "event", **rec.to_json()}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FirstOccurrenceStore":
        store = cls()
        pool: dict[frozenset, frozenset] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                kind = obj.pop("type", None)
                if kind == "header":
                    if obj.get("format") != "adseg-store":
                        raise DataError(f"{path}: not a store file")
                    store.n_seen = int(obj.get("n_seen", 0))
                elif kind == "user":
                    store._union_apps(obj["user"], frozenset(map(sys.intern, obj["apps"])))
                elif kind == "event":
                    rec = parse_record(json.dumps(obj), "jsonl", lineno=lineno)
                    store.records[rec.key] = _share_apps(rec, pool)
                else:
                    raise DataError(f"{path} line {lineno}: unknown entry type {kind!r}")
        return store


def dedup_first(records: Iterable[InteractionRecord]) -> FirstOccurrenceStore:
    """Reduce a record stream to first occurrences per (user, advert, stage)."""
    return FirstOccurrenceStore().update(records)


def store_as_stream(store: FirstOccurrenceStore) -> Iterator[InteractionRecord]:
    """Records of a store, carrying each user's full app union so it survives re-folding."""
    for rec in store:
        yield InteractionRecord(rec.user_id, store.user_apps[rec.user_id],
                                rec.timestamp, rec.stage, rec.advert, rec.publisher, rec.site)


def _ingest_file(args) -> tuple[FirstOccurrenceStore, ParseStats]:
    path, format, lenient, window, registry = args
    stats = ParseStats()
    store = dedup_first(read_log(path, format, lenient=lenient, stats=stats,
                                 window=window, registry=registry))
    return store, stats


def ingest_files(paths: list[str | Path], format: str | None = None, *, lenient: bool = False,
                 window=None, registry=None, threads: int = 1) -> tuple[FirstOccurrenceStore, ParseStats]:
    """Parse and dedup many log files, one shard per file, then merge."""
    jobs = [(p, format, lenient, window, registry) for p in paths]
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_ingest_file, jobs))
    else:
        results = [_ingest_file(j) for j in jobs]
    store, total = FirstOccurrenceStore(), ParseStats()
    for shard, stats in results:
        store = store.merge(shard) if len(store) or store.user_apps else shard
        total.parsed += stats.parsed
        total.skipped += stats.skipped
        total.errors.extend(stats.errors)
    return store, total
