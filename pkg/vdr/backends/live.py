import base64
import logging
import os
import threading
import time
from typing import Dict, List, Optional

import requests

from vdr.backends.base import CallKey, SearchHit, SearchResult, Timed
from vdr.backends.code import run_sandboxed
from vdr.config import LiveSettings
from vdr.errors import ToolError
from vdr.trajectory import ImageRef

logger = logging.getLogger(__name__)


class LiveBackend:
    """
    Blocking client for a search gateway (image search + web search) and
    plain page fetches. Runs on tool pool threads, so the rate limiter is
    shared behind a lock.
    """

    def __init__(self, settings: LiveSettings, api_key: Optional[str] = None, code_timeout_s: float = 10.0):
        self.settings = settings
        self.code_timeout_s = code_timeout_s
        self.session = requests.Session()
        self.session.headers.update({
            'User-Agent': 'vdr-research-engine/0.1',
            'Authorization': f"Bearer {api_key if api_key is not None else os.environ.get('VDR_SEARCH_API_KEY', '')}",
        })
        self.last_request_time = 0.0
        self._lock = threading.Lock()

    def _rate_limit(self):
        """Keep a minimum delay between requests across all threads."""
        with self._lock:
            since_last = time.time() - self.last_request_time
            if since_last < self.settings.rate_limit_delay_s:
                time.sleep(self.settings.rate_limit_delay_s - since_last)
            self.last_request_time = time.time()

    def _request(self, method: str, url: str, **kwargs) -> requests.Response:
        """Rate-limited request with retries; raises ToolError once attempts run out."""
        for attempt in range(self.settings.retries):
            self._rate_limit()
            try:
                response = self.session.request(method, url, timeout=self.settings.page_timeout_s, **kwargs)
                if response.status_code == 404:
                    raise ToolError(f"404 not found: {url}")
                response.raise_for_status()
                return response
            except requests.RequestException as e:
                if attempt == self.settings.retries - 1:
                    raise ToolError(f"request to {url} failed: {e}") from e
                logger.warning(f"Attempt {attempt + 1} for {url} failed: {e}. Retrying...")
                time.sleep(min(2 ** attempt, 8))

    def _json(self, response: requests.Response) -> Dict:
        try:
            return response.json()
        except ValueError as e:
            raise ToolError(f"invalid JSON from {response.url}") from e

    def visual_search(self, crop: ImageRef, key: CallKey) -> Timed[Optional[SearchHit]]:
        if crop.payload is None:
            raise ToolError(f"live image search needs pixels, {crop.id} is simulated")
        start = time.monotonic()
        response = self._request("POST", f"{self.settings.search_base_url}/image-search",
                                 json={"image": base64.b64encode(crop.payload).decode("ascii")})
        results = self._json(response).get("results", [])
        hit = None
        if results:
            top = results[0]
            hit = SearchHit(top["url"], top.get("title", ""), float(top.get("score", 0.0)))
        return Timed(hit, int((time.monotonic() - start) * 1000))

    def web_search(self, query: str, key: CallKey) -> Timed[List[SearchResult]]:
        start = time.monotonic()
        response = self._request("GET", f"{self.settings.search_base_url}/search", params={"q": query})
        results = [
            SearchResult(item["url"], item.get("title", ""), item.get("snippet", ""))
            for item in self._json(response).get("results", [])
        ]
        return Timed(results, int((time.monotonic() - start) * 1000))

    def visit(self, url: str, key: CallKey) -> Timed[str]:
        start = time.monotonic()
        response = self._request("GET", url)
        return Timed(response.text, int((time.monotonic() - start) * 1000))

    def run_code(self, source: str, key: CallKey) -> Timed[str]:
        start = time.monotonic()
        output = run_sandboxed(source, self.code_timeout_s)
        return Timed(output, int((time.monotonic() - start) * 1000))
