"""
Cached HTTP fetching for the NVD APIs and the public data files.

Every response body is stored on disk under a key derived from the URL and
its query, so reruns read from the cache instead of the network.
"""

import hashlib
import json
import logging
import time
from datetime import date, datetime, time as dtime, timedelta
from pathlib import Path
from typing import Any, Callable, Iterator
from urllib.parse import urlencode, urlparse

import requests
from tqdm import tqdm

logger = logging.getLogger(__name__)

CVE_API = "https://services.nvd.nist.gov/rest/json/cves/2.0"
HISTORY_API = "https://services.nvd.nist.gov/rest/json/cvehistory/2.0"
KEV_URL = "https://www.cisa.gov/sites/default/files/feeds/known_exploited_vulnerabilities.json"
EXPLOITDB_URL = "https://gitlab.com/exploit-database/exploitdb/-/raw/main/files_exploits.csv"
CWE_CATALOG_URL = "https://cwe.mitre.org/data/xml/cwec_latest.xml.zip"

# the NVD rejects date ranges longer than 120 days
MAX_WINDOW_DAYS = 120
# documented limits: 5 requests per 30 s without a key, 50 with one
DELAY_WITHOUT_KEY = 6.0
DELAY_WITH_KEY = 0.6

CVE_PAGE_SIZE = 2000
HISTORY_PAGE_SIZE = 5000


def validate_url(url):
    """Validate if a URL is well-formed.

    Args:
        url: URL string to validate

    Returns:
        bool: True if URL is valid, False otherwise
    """
    try:
        result = urlparse(url)
        return all([result.scheme in ("http", "https"), result.netloc])
    except ValueError:
        return False


def cache_key(url: str, params: dict[str, Any] | None = None) -> str:
    query = urlencode(sorted((params or {}).items()))
    return hashlib.sha256(f"{url}?{query}".encode("utf-8")).hexdigest()


def fetch_cached(
    url: str,
    cache_dir: Path,
    params: dict[str, Any] | None = None,
    headers: dict[str, str] | None = None,
    session: requests.Session | None = None,
    timeout: float = 60.0,
) -> tuple[bytes, bool]:
    """Fetch a URL once and keep the body on disk.

    Args:
        url: URL to fetch.
        cache_dir: Directory holding cached bodies.
        params: Query parameters, part of the cache key.
        headers: Extra request headers, not part of the cache key.
        session: Session to use; a plain ``requests`` call when None.
        timeout: Request timeout in seconds.

    Returns:
        tuple: (body, True when it came from the cache).

    Raises:
        ValueError: The URL is not an http(s) URL.
        requests.RequestException: The download failed.
    """
    if not validate_url(url):
        raise ValueError(f"Invalid URL: {url}")
    cache_dir = Path(cache_dir)
    path = cache_dir / cache_key(url, params)
    if path.exists():
        logger.debug("cache hit for %s", url)
        return path.read_bytes(), True

    getter = session.get if session is not None else requests.get
    response = getter(url, params=params, headers=headers, timeout=timeout)
    response.raise_for_status()
    cache_dir.mkdir(parents=True, exist_ok=True)
    partial = path.with_suffix(".part")
    partial.write_bytes(response.content)
    partial.replace(path)
    return response.content, False


def date_windows(start: date, end: date, days: int = MAX_WINDOW_DAYS) -> Iterator[tuple[datetime, datetime]]:
    """Split [start, end] into consecutive windows of at most ``days`` days."""
    if end < start:
        raise ValueError(f"end {end} precedes start {start}")
    current = start
    while current <= end:
        last = min(current + timedelta(days=days - 1), end)
        yield datetime.combine(current, dtime.min), datetime.combine(last, dtime(23, 59, 59, 999000))
        current = last + timedelta(days=1)


def _iso(moment: datetime) -> str:
    return moment.strftime("%Y-%m-%dT%H:%M:%S.") + f"{moment.microsecond // 1000:03d}"


class NvdClient:
    """Pages the NVD CVE and change-history APIs over bounded date windows.

    Args:
        cache_dir: Where page bodies are cached.
        api_key: NVD API key; raises the rate limit when set.
        session: Optional ``requests.Session`` (tests pass a fake one).
        sleep: Called between uncached requests to honour the rate limit.
    """

    def __init__(
        self,
        cache_dir: Path,
        api_key: str | None = None,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cache_dir = Path(cache_dir)
        self.api_key = api_key
        self.session = session or requests.Session()
        self.sleep = sleep
        self.delay = DELAY_WITH_KEY if api_key else DELAY_WITHOUT_KEY
        self._requests = 0

    def _get_json(self, url: str, params: dict[str, Any]) -> dict:
        headers = {"apiKey": self.api_key} if self.api_key else None
        # only pages that hit the network count against the limit
        if not (self.cache_dir / cache_key(url, params)).exists():
            if self._requests:
                self.sleep(self.delay)
            self._requests += 1
        body, _ = fetch_cached(url, self.cache_dir, params, headers, self.session)
        return json.loads(body)

    def _pages(self, url: str, params: dict[str, Any], items_key: str, page_size: int) -> list[dict]:
        items: list[dict] = []
        start_index = 0
        while True:
            page = self._get_json(url, {**params, "resultsPerPage": page_size, "startIndex": start_index})
            batch = page.get(items_key, [])
            items.extend(batch)
            start_index += len(batch)
            if not batch or start_index >= page.get("totalResults", 0):
                return items

    def _windows(self, url, start, end, keys, items_key, page_size, desc) -> list[dict]:
        items: list[dict] = []
        windows = list(date_windows(start, end))
        for lower, upper in tqdm(windows, desc=desc, unit="window"):
            params = {keys[0]: _iso(lower), keys[1]: _iso(upper)}
            items.extend(self._pages(url, params, items_key, page_size))
        logger.info("fetched %d %s between %s and %s", len(items), items_key, start, end)
        return items

    def fetch_cves(self, start: date, end: date) -> bytes:
        """CVEs published in [start, end] as one API 2.0 document."""
        items = self._windows(
            CVE_API, start, end, ("pubStartDate", "pubEndDate"), "vulnerabilities", CVE_PAGE_SIZE, "CVE windows"
        )
        document = {"format": "NVD_CVE", "version": "2.0", "totalResults": len(items), "vulnerabilities": items}
        return json.dumps(document, sort_keys=True).encode("utf-8")

    def fetch_history(self, start: date, end: date) -> bytes:
        """Change-history entries created in [start, end] as one document."""
        items = self._windows(
            HISTORY_API,
            start,
            end,
            ("changeStartDate", "changeEndDate"),
            "cveChanges",
            HISTORY_PAGE_SIZE,
            "History windows",
        )
        document = {"format": "NVD_CVEHistory", "version": "2.0", "totalResults": len(items), "cveChanges": items}
        return json.dumps(document, sort_keys=True).encode("utf-8")
