"""Small file helpers: atomic writes and plain key=value manifests."""

import os
import tempfile


def atomic_write_text(path: str, text: str) -> None:
    """Write text to path via a temp file and atomic rename.

    A failed write never leaves a partial file at the destination.
    """
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_key_values(items: dict) -> str:
    """Render a dict as one key=value per line (insertion order preserved)."""
    lines = []
    for key, value in items.items():
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_key_values(text: str) -> dict:
    """Parse key=value lines; blank lines and '#' comments are skipped."""
    out = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"not a key=value line: {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
