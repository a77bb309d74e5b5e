"""Error type shared by every module; the ``code`` attribute is machine readable."""

from __future__ import annotations


class RSFDIError(Exception):
    """Failure with a stable code such as ``UNBOUNDED_TAIL`` or ``DECOUPLING_FAIL``."""

    def __init__(self, code: str, message: str, **detail):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.detail = detail

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message,
                "detail": {k: repr(v) for k, v in self.detail.items()}}
