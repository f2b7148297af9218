from .exceptions import LabError
from .responses import success_response, error_response, paginated_response

__all__ = [
    "LabError",
    "success_response",
    "error_response",
    "paginated_response",
]
