from vdr.backends.base import CallKey, SearchHit, SearchResult, Timed, ToolBackend

__all__ = ['CallKey', 'SearchHit', 'SearchResult', 'Timed', 'ToolBackend']
