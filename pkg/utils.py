"""
Utility functions for the DPT toolkit.
"""
import hashlib
import os
import re
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

PathLike = Union[str, os.PathLike]

# `# key=value` lines at the top of an artifact; anything later is data
HEADER_LINE = re.compile(r'^# [A-Za-z_][A-Za-z0-9_]*=[^\t]*$')


class ParseError(ValueError):
    """Malformed text input, tagged with its 1-based line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


def is_header_line(line: str) -> bool:
    return bool(HEADER_LINE.match(line))


def iter_data_lines(lines: Iterable[str]):
    """
    Yield (line_number, line) for the data lines of a text artifact.

    Only the leading block of `# key=value` header lines is skipped, so a raw
    id such as '#7' further down is data. Blank or whitespace-only lines are
    malformed.

    Raises:
        ParseError: blank line
    """
    in_header = True
    for line_number, line in enumerate(lines, start=1):
        line = line.rstrip('\r\n')
        if in_header and is_header_line(line):
            continue
        in_header = False
        if not line.strip():
            raise ParseError(line_number, "blank line")
        yield line_number, line


def derive_seed(seed: int, *names: str) -> int:
    """
    Derive a named sub-seed from the run seed.

    The same (seed, names) always yields the same 63-bit integer on every
    platform, so adding a new named stream never perturbs existing ones.

    Args:
        seed: Run seed
        *names: Stream names, e.g. ('sampling', 'stage1')

    Returns:
        Non-negative integer seed
    """
    payload = "/".join([str(int(seed))] + [str(name) for name in names]).encode('utf-8')
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], 'little') & ((1 << 63) - 1)


def short_hash(text: str, length: int = 16) -> str:
    """SHA-256 hex digest of text, truncated."""
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:length]


def format_float(value: float) -> str:
    """Shortest round-tripping text for a float (stable across runs)."""
    return repr(float(value))


def atomic_write_bytes(path: PathLike, payload: bytes):
    """
    Write bytes atomically (temp file + rename).

    Args:
        path: Destination file
        payload: File content
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_suffix(path.suffix + '.tmp')
    with open(temp_file, 'wb') as f:
        f.write(payload)
    temp_file.replace(path)


def atomic_write_text(path: PathLike, text: str):
    """Write UTF-8 text atomically."""
    atomic_write_bytes(path, text.encode('utf-8'))


def write_tsv(path: PathLike, rows: Iterable[Sequence], comments: Optional[Sequence[str]] = None):
    """
    Write tab-separated rows, optionally preceded by '# ' comment lines.

    Args:
        path: Destination file
        rows: Iterable of row sequences (converted with str; floats via repr)
        comments: Lines written as '# <line>' before the rows
    """
    lines = []
    for comment in comments or []:
        lines.append(f"# {comment}")
    for row in rows:
        lines.append("\t".join(format_float(v) if isinstance(v, float) else str(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_tsv(path: PathLike):
    """
    Read tab-separated rows after the leading header block.

    Yields:
        (line_number, fields) tuples, line numbers 1-based

    Raises:
        ParseError: blank line
    """
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in iter_data_lines(f):
            yield line_number, line.split('\t')


def read_tsv_comments(path: PathLike) -> dict:
    """Parse the leading '# key=value' header lines of a TSV artifact."""
    meta = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.rstrip('\r\n')
            if not is_header_line(line):
                break
            key, value = line[2:].split('=', 1)
            meta[key] = value.strip()
    return meta


def require_file(path: PathLike, producer: str) -> Path:
    """
    Ensure a prerequisite artifact exists.

    Args:
        path: Artifact path
        producer: Command that creates it (for the diagnostic)

    Returns:
        The path as a Path

    Raises:
        FileNotFoundError: naming the artifact and the command to run first
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}: run '{producer}' first")
    return path


def run_test_suite(title: str, tests, log) -> int:
    """
    Run (name, fn) test pairs outside pytest and log a PASS/FAIL summary.

    Args:
        title: Suite name for the summary banner
        tests: Sequence of (test name, zero-argument callable) pairs
        log: Logger receiving progress lines

    Returns:
        Process exit code (0 when every test passed)
    """
    results = []
    for test_name, test_func in tests:
        log.info(f"Running {test_name}...")
        try:
            test_func()
            results.append((test_name, True))
            log.info(f"✓ {test_name} PASSED")
        except Exception as e:
            log.error(f"✗ {test_name} FAILED: {type(e).__name__}: {e}")
            results.append((test_name, False))

    log.info("=" * 50)
    log.info(f"{title} SUMMARY")
    log.info("=" * 50)
    passed = sum(1 for _, ok in results if ok)
    for test_name, ok in results:
        log.info(f"{test_name}: {'PASS' if ok else 'FAIL'}")
    log.info(f"Overall: {passed}/{len(results)} tests passed")
    return 0 if passed == len(results) else 1
