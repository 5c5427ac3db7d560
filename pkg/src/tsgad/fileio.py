"""Write-then-rename file output so failures never leave partial artifacts."""

import os
import tempfile


def atomic_write_text(path: str, text: str) -> None:
    """Write text to path atomically (temp file in the same directory, then rename)."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
