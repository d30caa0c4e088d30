import math
from typing import Any, Dict, List, Sequence


def format_value(value: Any, width: int = 12) -> str:
    if value is None or value == '':
        return '-'
    if isinstance(value, bool):
        return 'yes' if value else 'no'
    if isinstance(value, float):
        if math.isnan(value):
            return 'nan'
        if math.isinf(value):
            return '∞' if value > 0 else '-∞'
        if value == 0 or 1e-3 <= abs(value) < 1e5:
            return f"{value:.6g}"
        return f"{value:.3e}"
    text = str(value)
    return text if len(text) <= width else text[:width - 1] + '…'


def format_table(rows: Sequence[Dict[str, Any]], columns: Sequence[str], title: str = '') -> str:
    """Fixed-width text table; text columns left-aligned, numbers right-aligned."""
    cells = [[format_value(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    numeric = [all(isinstance(r.get(c), (int, float)) or r.get(c) is None for r in rows) for c in columns]

    def line(values: List[str]) -> str:
        parts = [v.rjust(w) if num else v.ljust(w) for v, w, num in zip(values, widths, numeric)]
        return '  '.join(parts).rstrip()

    out = []
    if title:
        out.append(title)
    out.append(line(list(columns)))
    out.append('  '.join('-' * w for w in widths))
    out.extend(line(row) for row in cells)
    return '\n'.join(out) + '\n'


def summary_rows(records) -> List[Dict[str, Any]]:
    """One row per result record: command, config hash prefix, headline numbers."""
    rows = []
    for rec in records:
        row = {'command': rec.command, 'config': rec.config_hash[:10],
               'status': 'failed' if rec.failed else 'ok', 'warnings': len(rec.warnings)}
        for key, value in sorted(rec.headline.items()):
            if isinstance(value, (int, float, bool, str)) or value is None:
                row[key] = value
        rows.append(row)
    return rows


def summary_columns(rows: Sequence[Dict[str, Any]]) -> List[str]:
    fixed = ['command', 'config', 'status', 'warnings']
    extra = sorted({k for r in rows for k in r} - set(fixed))
    return fixed + extra
