#!/usr/bin/env python3
"""Build data/corpus.txt from docstrings in the Python standard library.

Docstrings are plain English prose mixed with code snippets, which makes a
reasonable byte-level training set that anyone can regenerate offline.
"""
import argparse
import ast
import pathlib
import sysconfig

MIN_CHARS = 80


def docstrings(path):
    try:
        tree = ast.parse(path.read_text(encoding="utf-8"), filename=str(path))
    except (SyntaxError, UnicodeDecodeError, ValueError):
        return
    nodes = [tree] + [
        n for n in ast.walk(tree)
        if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef))
    ]
    for node in nodes:
        doc = ast.get_docstring(node, clean=True)
        if doc and len(doc) > MIN_CHARS:
            yield doc


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data" / "corpus.txt"))
    ap.add_argument("--min-bytes", type=int, default=1 << 20)
    ap.add_argument("--max-bytes", type=int, default=(1 << 20) + (1 << 18))
    args = ap.parse_args()

    root = pathlib.Path(sysconfig.get_paths()["stdlib"])
    chunks, total = [], 0
    for path in sorted(root.rglob("*.py")):
        rel = path.relative_to(root).parts
        if rel[0] in ("site-packages", "dist-packages", "test", "idlelib", "lib2to3"):
            continue
        for doc in docstrings(path):
            data = doc.encode("utf-8") + b"\n\n"
            chunks.append(data)
            total += len(data)
        if total >= args.max_bytes:
            break
    blob = b"".join(chunks)[: args.max_bytes]
    if len(blob) < args.min_bytes:
        raise SystemExit(f"only {len(blob)} bytes of docstrings found, need {args.min_bytes}")
    out = pathlib.Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(blob)
    print(f"wrote {len(blob)} bytes to {out}")


if __name__ == "__main__":
    main()
