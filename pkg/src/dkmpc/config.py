"""Flat ``key = value`` configuration files.

Values are parsed as int, float, bool or comma-separated float lists when
possible and kept as strings otherwise.  ``#`` starts a comment.
"""


def parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in text:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        try:
            return [float(p) for p in parts]
        except ValueError:
            return parts
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_kv(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = parse_value(value)
    return out


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def write_kv(mapping, path):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in mapping.items():
            fh.write(f"{key} = {format_value(value)}\n")


def apply_overrides(mapping, overrides):
    """Merge ``key=value`` strings (e.g. from ``--set``) into ``mapping``."""
    out = dict(mapping)
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out
