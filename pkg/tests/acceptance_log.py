"""Collects one verdict line per acceptance criterion."""

import contextlib

RESULTS: list = []


@contextlib.contextmanager
def criterion(cid: str, title: str):
    """Wrap a criterion's checks; ``rec["detail"]`` is printed with the verdict."""
    rec = {"detail": ""}
    try:
        yield rec
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        detail = f"{rec['detail']}; {msg[:300]}" if rec["detail"] else msg[:300]
        _record(cid, False, title, detail)
        raise
    else:
        _record(cid, True, title, rec["detail"])


def _record(cid, ok, title, detail):
    line = f"{cid} {'PASS' if ok else 'FAIL'} {title}" + (f" ({detail})" if detail else "")
    RESULTS.append(line)
    print(line)
