"""PubMed co-occurrence counts for drug-gene pairs via NCBI ESearch."""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .tables import read_rows, write_rows

log = logging.getLogger(__name__)

ESEARCH_URL = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils/esearch.fcgi"
LIVE, CACHE, FIXTURE = "live", "cache", "fixture"
DEFAULT_RATE = 3.0
MAX_ATTEMPTS = 3


class ProtocolError(RuntimeError):
    """The service answered, but not with something we can read a count from."""


class ServiceUnavailable(RuntimeError):
    pass


def normalize_pair(drug: str, gene: str) -> tuple[str, str]:
    drug, gene = drug.strip(), gene.strip()
    if not drug or not gene:
        raise ValueError("drug and gene identifiers must be non-empty")
    return drug.lower(), gene.upper()


def build_term(drug: str, gene: str, field_tag: str | None = None) -> str:
    tag = f"[{field_tag}]" if field_tag else ""
    return f'"{drug}"{tag} AND "{gene}"{tag}'


@dataclass
class CoOccurrenceRecord:
    drug: str
    gene: str
    count: int | None  # None marks an unavailable lookup, never coerced to 0
    timestamp: str
    source: str

    @property
    def available(self) -> bool:
        return self.count is not None

    def log_count(self) -> float:
        """Natural-log count for heat maps; log(1 + count) keeps zero finite."""
        return math.log1p(self.count) if self.count is not None else math.nan


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class TokenBucket:
    """Allow at most ``rate`` acquisitions per second (burst ``capacity``)."""

    def __init__(self, rate: float = DEFAULT_RATE, capacity: float | None = None,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate)
        self.capacity = float(capacity if capacity is not None else 1.0)
        self.clock, self.sleep = clock, sleep
        self.tokens = self.capacity
        self.last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            while True:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
                self.last = now
                # tolerance so refill round-off cannot demand a sleep too short to advance the clock
                if self.tokens >= 1.0 - 1e-9:
                    self.tokens = max(0.0, self.tokens - 1.0)
                    return
                self.sleep((1.0 - self.tokens) / self.rate)


# transports take (drug, gene) and return a count, or raise
Transport = Callable[[str, str], int]


def parse_esearch(payload: bytes | str) -> int:
    try:
        doc = json.loads(payload)
        count = int(doc["esearchresult"]["count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"unreadable ESearch response: {exc}") from None
    if count < 0:
        raise ProtocolError("negative count in ESearch response")
    return count


class LiveTransport:
    def __init__(self, api_key: str | None = None, email: str | None = None, field_tag: str | None = None,
                 timeout: float = 30.0, opener: Callable = urllib.request.urlopen):
        self.api_key = api_key if api_key is not None else os.environ.get("NCBI_API_KEY")
        self.email = email if email is not None else os.environ.get("NCBI_EMAIL")
        self.field_tag, self.timeout, self.opener = field_tag, timeout, opener

    def url(self, drug: str, gene: str) -> str:
        params = {"db": "pubmed", "term": build_term(drug, gene, self.field_tag), "retmode": "json", "retmax": "0"}
        if self.api_key:
            params["api_key"] = self.api_key
        if self.email:
            params["email"] = self.email
        return ESEARCH_URL + "?" + urllib.parse.urlencode(params)

    def __call__(self, drug: str, gene: str) -> int:
        try:
            with self.opener(self.url(drug, gene), timeout=self.timeout) as resp:
                body = resp.read()
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise ServiceUnavailable(str(exc)) from exc
        return parse_esearch(body)


class FixtureTransport:
    """Look counts up in a local table; pairs not listed count as zero."""

    def __init__(self, table: Mapping[tuple[str, str], int]):
        self.table = {normalize_pair(d, g): int(c) for (d, g), c in table.items()}

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureTransport":
        rows = read_rows(path)
        if rows and rows[0][-1].strip().lower() == "count":
            rows = rows[1:]
        table = {}
        for r in rows:
            if len(r) < 3:
                raise ValueError(f"{path}: fixture rows need drug, gene, count")
            table[(r[0], r[1])] = int(r[2])
        return cls(table)

    def __call__(self, drug: str, gene: str) -> int:
        return self.table.get(normalize_pair(drug, gene), 0)


class DiskCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, drug: str, gene: str) -> Path:
        d, g = normalize_pair(drug, gene)
        safe = urllib.parse.quote(f"{d}__{g}", safe="")
        return self.root / f"{safe}.json"

    def get(self, drug: str, gene: str) -> int | None:
        p = self._path(drug, gene)
        if not p.exists():
            return None
        return int(json.loads(p.read_text())["count"])

    def put(self, drug: str, gene: str, count: int) -> None:
        p = self._path(drug, gene)
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump({"drug": drug, "gene": gene, "count": int(count), "timestamp": _now()}, fh)
        os.replace(tmp, p)


@dataclass
class PubMedClient:
    transport: Transport
    source: str = LIVE
    cache: DiskCache | None = None
    limiter: TokenBucket | None = None
    aliases: Mapping[str, str] = field(default_factory=dict)
    attempts: int = MAX_ATTEMPTS
    backoff: float = 1.0
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self):
        if self.limiter is None and self.source == LIVE:
            self.limiter = TokenBucket(DEFAULT_RATE)

    def resolve(self, drug: str) -> str:
        return self.aliases.get(drug.strip(), drug.strip())

    def count(self, drug: str, gene: str) -> CoOccurrenceRecord:
        name = self.resolve(drug)
        normalize_pair(name, gene)
        if self.cache is not None:
            hit = self.cache.get(name, gene)
            if hit is not None:
                return CoOccurrenceRecord(drug, gene, hit, _now(), CACHE)
        for attempt in range(self.attempts):
            if self.limiter is not None:
                self.limiter.acquire()
            try:
                n = self.transport(name, gene)
            except ServiceUnavailable as exc:
                log.warning("ESearch attempt %d/%d for %s/%s failed: %s", attempt + 1, self.attempts, name, gene, exc)
                if attempt + 1 < self.attempts:
                    self.sleep(self.backoff * 2 ** attempt)
                continue
            if self.cache is not None:
                self.cache.put(name, gene, n)
            return CoOccurrenceRecord(drug, gene, n, _now(), self.source)
        return CoOccurrenceRecord(drug, gene, None, _now(), self.source)


def count_cooccurrence(drug: str, gene: str, transport: Transport | PubMedClient) -> CoOccurrenceRecord:
    client = transport if isinstance(transport, PubMedClient) else PubMedClient(
        transport, FIXTURE if isinstance(transport, FixtureTransport) else LIVE)
    return client.count(drug, gene)


@dataclass(frozen=True)
class SupportSummary:
    total: int = 0
    known: int = 0
    novel: int = 0
    supported: int = 0
    novel_supported: int = 0
    known_supported: int = 0
    pct_drugs_novel_supported: float = 0.0
    unavailable: int = 0

    def rows(self) -> list[tuple[str, str]]:
        return [("total_predicted_pairs", str(self.total)), ("known_pairs", str(self.known)),
                ("novel_pairs", str(self.novel)), ("pairs_with_support", str(self.supported)),
                ("novel_pairs_with_support", str(self.novel_supported)),
                ("known_pairs_with_support", str(self.known_supported)),
                ("pct_drugs_with_supported_novel_pair", f"{self.pct_drugs_novel_supported:.2f}"),
                ("unavailable_lookups", str(self.unavailable))]


def summarize_support(pairs: Sequence[tuple[str, str]], known: Iterable[tuple[str, str]],
                      records: Mapping[tuple[str, str], CoOccurrenceRecord]) -> SupportSummary:
    """Tally predicted pairs against the known DTI set and their literature support."""
    known_set = {normalize_pair(d, g) for d, g in known}
    pairs = list(dict.fromkeys(pairs))
    if not pairs:
        return SupportSummary()
    by_key = {normalize_pair(d, g): r for (d, g), r in records.items()}
    total = len(pairs)
    n_known = supported = novel_sup = known_sup = unavailable = 0
    drugs, drugs_hit = set(), set()
    for d, g in pairs:
        key = normalize_pair(d, g)
        drugs.add(key[0])
        is_known = key in known_set
        n_known += is_known
        rec = by_key.get(key)
        if rec is None or not rec.available:
            unavailable += 1
            continue
        if rec.count >= 1:
            supported += 1
            if is_known:
                known_sup += 1
            else:
                novel_sup += 1
                drugs_hit.add(key[0])
    return SupportSummary(total, n_known, total - n_known, supported, novel_sup, known_sup,
                          100.0 * len(drugs_hit) / len(drugs), unavailable)


def read_alias_file(path: str | Path) -> dict[str, str]:
    rows = read_rows(path)
    return {r[0].strip(): r[1].strip() for r in rows if len(r) >= 2 and r[0].strip().lower() not in ("nsc", "id")}


def write_records(path: str | Path, records: Iterable[CoOccurrenceRecord]) -> None:
    write_rows(path, ["drug", "gene", "count", "ln_count", "timestamp", "source"],
               [[r.drug, r.gene, "" if r.count is None else str(r.count),
                 "" if r.count is None else repr(r.log_count()), r.timestamp, r.source] for r in records])


def heatmap_matrix(records: Iterable[CoOccurrenceRecord]) -> tuple[list[str], list[str], list[list[float]]]:
    """Drug x gene grid of natural-log counts; missing or unavailable cells are NaN."""
    records = list(records)
    drugs = list(dict.fromkeys(r.drug for r in records))
    genes = list(dict.fromkeys(r.gene for r in records))
    grid = [[math.nan] * len(genes) for _ in drugs]
    di, gi = {d: i for i, d in enumerate(drugs)}, {g: j for j, g in enumerate(genes)}
    for r in records:
        grid[di[r.drug]][gi[r.gene]] = r.log_count()
    return drugs, genes, grid
