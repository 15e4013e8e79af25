"""
CrossFundus Report Generator
Fixed-width text tables and HTML reports from run results
"""

from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

from jinja2 import Environment

TEXT_TEMPLATE = """{{ title }}
{% for col in columns %}{{ col.label | cell(col) }}{% if not loop.last %}  {% endif %}{% endfor %}

{{ rule }}
{% for row in rows %}
{% for col in columns %}{{ row[col.key] | value(col) | cell(col) }}{% if not loop.last %}  {% endif %}{% endfor %}

{% endfor %}
{% if footer %}{{ footer }}
{% endif %}"""

HTML_TEMPLATE = """<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>CrossFundus {{ title }}</title>
    <style>
        body {
            font-family: 'Segoe UI', Tahoma, Geneva, Verdana, sans-serif;
            line-height: 1.6;
            margin: 0;
            padding: 20px;
            background-color: #f5f5f5;
        }
        .container {
            max-width: 1100px;
            margin: 0 auto;
            background-color: white;
            padding: 30px;
            border-radius: 10px;
            box-shadow: 0 0 20px rgba(0,0,0,0.1);
        }
        .header {
            text-align: center;
            border-bottom: 3px solid #007bff;
            padding-bottom: 20px;
            margin-bottom: 30px;
        }
        .title { color: #007bff; font-size: 2.2em; margin: 0; }
        .subtitle { color: #6c757d; font-size: 1.1em; margin: 10px 0 0 0; }
        .metadata {
            display: grid;
            grid-template-columns: repeat(auto-fit, minmax(220px, 1fr));
            gap: 15px;
            margin: 20px 0;
        }
        .metadata-item {
            background-color: #f8f9fa;
            padding: 15px;
            border-radius: 5px;
            border-left: 4px solid #007bff;
        }
        .metadata-label { font-weight: bold; color: #495057; }
        .metadata-value { color: #212529; margin-top: 5px; }
        .stats-grid {
            display: grid;
            grid-template-columns: repeat(auto-fit, minmax(180px, 1fr));
            gap: 15px;
            margin: 20px 0;
        }
        .stat-card {
            background: linear-gradient(135deg, #667eea 0%, #764ba2 100%);
            color: white;
            padding: 20px;
            border-radius: 10px;
            text-align: center;
        }
        .stat-value { font-size: 1.8em; font-weight: bold; margin-bottom: 5px; }
        .stat-label { font-size: 0.9em; opacity: 0.9; }
        .section-title {
            color: #007bff;
            font-size: 1.4em;
            margin: 30px 0 15px 0;
            border-bottom: 2px solid #e9ecef;
            padding-bottom: 10px;
        }
        .result-table { width: 100%; border-collapse: collapse; margin: 20px 0; }
        .result-table th { background-color: #007bff; color: white; padding: 10px; text-align: left; }
        .result-table td { padding: 8px 10px; border-bottom: 1px solid #e9ecef; font-family: monospace; }
        .result-table tr:nth-child(even) { background-color: #f8f9fa; }
        .best { background-color: #fff3cd !important; border-left: 4px solid #ffc107; }
        .footer {
            text-align: center;
            margin-top: 40px;
            padding-top: 20px;
            border-top: 1px solid #e9ecef;
            color: #6c757d;
        }
    </style>
</head>
<body>
    <div class="container">
        <div class="header">
            <h1 class="title">CrossFundus</h1>
            <p class="subtitle">{{ title }}</p>
        </div>

        <div class="metadata">
            {% for label, value in metadata %}
            <div class="metadata-item">
                <div class="metadata-label">{{ label }}</div>
                <div class="metadata-value">{{ value }}</div>
            </div>
            {% endfor %}
        </div>

        {% if highlights %}
        <div class="stats-grid">
            {% for label, value in highlights %}
            <div class="stat-card">
                <div class="stat-value">{{ value }}</div>
                <div class="stat-label">{{ label }}</div>
            </div>
            {% endfor %}
        </div>
        {% endif %}

        {% for table in tables %}
        <h2 class="section-title">{{ table.title }}</h2>
        <table class="result-table">
            <thead>
                <tr>{% for col in table.columns %}<th>{{ col.label }}</th>{% endfor %}</tr>
            </thead>
            <tbody>
                {% for row in table.rows %}
                <tr{% if row.get('_best') %} class="best"{% endif %}>{% for col in table.columns %}<td>{{ row[col.key] | value(col) }}</td>{% endfor %}</tr>
                {% endfor %}
            </tbody>
        </table>
        {% endfor %}

        <div class="footer">
            <p>Generated by CrossFundus on {{ generation_time }}</p>
        </div>
    </div>
</body>
</html>
"""


def _value(v: Any, col: Dict[str, Any]) -> str:
    kind = col.get("kind", "text")
    if v is None:
        return "-"
    if kind == "pct":
        return f"{100.0 * v:.2f}"
    if kind == "float":
        return f"{v:.4f}"
    if kind == "sci":
        return f"{v:.3e}"
    if kind == "flag":
        return "yes" if v else "-"
    return str(v)


def _cell(text: Any, col: Dict[str, Any]) -> str:
    width = col["width"]
    return f"{text:<{width}}" if col.get("kind", "text") == "text" else f"{text:>{width}}"


def _env() -> Environment:
    env = Environment(trim_blocks=True, lstrip_blocks=True, keep_trailing_newline=True, autoescape=False)
    env.filters["value"] = _value
    env.filters["cell"] = _cell
    return env


METRIC_COLUMNS = [
    {"key": "kappa", "label": "Kappa", "kind": "pct"},
    {"key": "accuracy", "label": "Acc", "kind": "pct"},
    {"key": "macro_f1", "label": "F1", "kind": "pct"},
]

COMPARISON_COLUMNS = [{"key": "name", "label": "Method", "kind": "text"}] + METRIC_COLUMNS
LOSS_COLUMNS = [
    {"key": "name", "label": "Variant", "kind": "text"},
    {"key": "L_cf", "label": "L_cf", "kind": "flag"},
    {"key": "L_if", "label": "L_if", "kind": "flag"},
    {"key": "projection", "label": "LP", "kind": "flag"},
    {"key": "fusion", "label": "Fusion", "kind": "text"},
] + METRIC_COLUMNS
SWEEP_COLUMNS = [{"key": "lambda", "label": "lambda", "kind": "float"}] + METRIC_COLUMNS
HISTORY_COLUMNS = [
    {"key": "epoch", "label": "Epoch", "kind": "int"},
    {"key": "lr", "label": "LR", "kind": "sci"},
    {"key": "mean_loss", "label": "Loss", "kind": "float"},
] + METRIC_COLUMNS
EVAL_COLUMNS = [{"key": "rule", "label": "Rule", "kind": "text"}, {"key": "n_samples", "label": "N", "kind": "int"}] \
    + METRIC_COLUMNS


class CrossFundusReportGenerator:
    """Render result dictionaries as aligned text tables or an HTML page"""

    def __init__(self):
        self.env = _env()

    def render_table(self, title: str, columns: Sequence[Dict[str, Any]], rows: Sequence[Dict[str, Any]],
                     footer: Optional[str] = None) -> str:
        sized = []
        for col in columns:
            width = max([len(col["label"])] + [len(_value(r.get(col["key"]), col)) for r in rows])
            sized.append(dict(col, width=width))
        rule = "-" * (sum(c["width"] for c in sized) + 2 * (len(sized) - 1))
        template = self.env.from_string(TEXT_TEMPLATE)
        return template.render(title=title, columns=sized, rows=[dict(r) for r in rows], rule=rule, footer=footer)

    def ablation_tables(self, results: Sequence[Dict[str, Any]]) -> str:
        parts = []
        comparison = [r for r in results if r["table"] == "comparison"]
        loss = [r for r in results if r["table"] == "loss"]
        if comparison:
            parts.append(self.render_table("Comparison of fusion strategies", COMPARISON_COLUMNS, comparison))
        if loss:
            parts.append(self.render_table("Loss and projection ablation", LOSS_COLUMNS, loss))
        return "\n".join(parts)

    def sweep_table(self, sweep: Dict[str, Any]) -> str:
        return self.render_table("Loss weight sweep", SWEEP_COLUMNS, sweep["points"],
                                 footer=f"best lambda: {sweep['best_lambda']:g}")

    def history_table(self, history: Sequence[Dict[str, Any]]) -> str:
        return self.render_table("Training history", HISTORY_COLUMNS, history)

    def eval_table(self, report: Dict[str, Any], rule: str) -> str:
        return self.render_table("Evaluation", EVAL_COLUMNS, [dict(report, rule=rule)])

    def generate_html_report(self, report: Dict[str, Any], output_path: Optional[str] = None) -> str:
        """Render a run's result document (ablation, sweep or training) to HTML"""
        if not output_path:
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            output_path = f"crossfundus_report_{timestamp}.html"

        tables: List[Dict[str, Any]] = []
        highlights = []
        results = report.get("results", [])
        for table, title, columns in (("comparison", "Comparison of fusion strategies", COMPARISON_COLUMNS),
                                      ("loss", "Loss and projection ablation", LOSS_COLUMNS)):
            rows = [r for r in results if r.get("table") == table]
            if rows:
                best = max(rows, key=lambda r: r["kappa"])
                tables.append({"title": title, "columns": columns,
                               "rows": [dict(r, _best=r is best) for r in rows]})
                highlights.append((f"Best {table} kappa ({best['name']})", f"{100.0 * best['kappa']:.2f}"))
        if "sweep" in report:
            sweep = report["sweep"]
            rows = [dict(p, _best=p["lambda"] == sweep["best_lambda"]) for p in sweep["points"]]
            tables.append({"title": "Loss weight sweep", "columns": SWEEP_COLUMNS, "rows": rows})
            highlights.append(("Best lambda", f"{sweep['best_lambda']:g}"))
        if "history" in report:
            tables.append({"title": "Training history", "columns": HISTORY_COLUMNS, "rows": report["history"]})
            final = report["history"][-1] if report["history"] else None
            if final:
                highlights += [("Kappa", f"{100.0 * final['kappa']:.2f}"), ("Acc", f"{100.0 * final['accuracy']:.2f}"),
                               ("F1", f"{100.0 * final['macro_f1']:.2f}")]

        metadata = [(k.replace("_", " ").title(), v) for k, v in report.get("metadata", {}).items()]
        template = self.env.from_string(HTML_TEMPLATE)
        html_content = template.render(
            title=report.get("title", "Run report"),
            metadata=metadata,
            highlights=highlights,
            tables=tables,
            generation_time=datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
        )
        with open(output_path, 'w', encoding='utf-8') as f:
            f.write(html_content)
        return output_path


report_generator = CrossFundusReportGenerator()


def generate_html_report(report: Dict[str, Any], path: Optional[str] = None) -> str:
    return report_generator.generate_html_report(report, path)
