"""Flat ``key=value`` text files (one pair per line, ``#`` comments)."""


def parse_kv(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv(path):
    with open(path) as fh:
        return parse_kv(fh.read())


def format_kv(d):
    return "".join(f"{k}={d[k]}\n" for k in d)


def write_kv(path, d):
    with open(path, "w") as fh:
        fh.write(format_kv(d))
