// HTML renderers for the two views. Pure string templates over API payloads;
// event wiring lives in app.ts.

import type {
  GoalCheckRow,
  IterationRow,
  MetricsFlat,
  SessionDetail,
  SessionStatus,
  SessionSummary,
} from "./types.js";
import { dvhChartSvg } from "./dvh.js";
import { escapeHtml, highlightRationale } from "./markers.js";

const METRIC_LABELS: Record<string, string> = {
  coverage: "Coverage",
  dmax: "Dmax",
  ci: "CI",
  gi: "GI",
  v12: "V12Gy",
  rtog_ratio: "PIV/TV",
  dmax_brainstem: "Brainstem Dmax",
  dmax_optic_chiasm: "Chiasm Dmax",
  dmax_optic_nerve_l: "Optic nerve L Dmax",
  dmax_optic_nerve_r: "Optic nerve R Dmax",
  dmax_cochlea_l: "Cochlea L Dmax",
  dmax_cochlea_r: "Cochlea R Dmax",
  dmax_normal_brain: "Normal brain Dmax",
};

const METRIC_UNITS: Record<string, string> = {
  coverage: "%",
  dmax: "Gy",
  v12: "cc",
};

export function metricLabel(metric: string): string {
  return METRIC_LABELS[metric] ?? metric;
}

export function formatValue(value: number | null | undefined, digits = 2): string {
  if (value === null || value === undefined) return "–";
  return value.toFixed(digits);
}

export function statusChip(status: SessionStatus): string {
  return `<span class="chip status-${status}">${status}</span>`;
}

// ---------------------------------------------------------------------------
// Session list
// ---------------------------------------------------------------------------

export function renderSessionList(sessions: SessionSummary[]): string {
  if (sessions.length === 0) {
    return `<section class="panel"><h1>Plan reviews</h1><p class="empty">No sessions in the store.</p></section>`;
  }
  const rows = sessions
    .map((s) => {
      const goals =
        s.goals_passed === null || s.goals_total === null ? "–" : `${s.goals_passed}/${s.goals_total}`;
      const ci = s.metrics ? formatValue(s.metrics["ci"]) : "–";
      const coverage = s.metrics ? formatValue(s.metrics["coverage"], 1) : "–";
      return `<tr class="session-row" data-session-id="${escapeHtml(s.id)}">
        <td class="mono">${escapeHtml(s.id)}</td>
        <td>${statusChip(s.status)}</td>
        <td>${s.round}</td>
        <td>${goals}</td>
        <td>${coverage}</td>
        <td>${ci}</td>
        <td>${escapeHtml(s.policy_name)}</td>
      </tr>`;
    })
    .join("\n");
  return `<section class="panel">
  <h1>Plan reviews</h1>
  <table class="sessions">
    <thead><tr><th>Session</th><th>Status</th><th>Round</th><th>Goals</th><th>Coverage %</th><th>CI</th><th>Policy</th></tr></thead>
    <tbody>${rows}</tbody>
  </table>
</section>`;
}

// ---------------------------------------------------------------------------
// Session detail
// ---------------------------------------------------------------------------

export function selectedRecord(detail: SessionDetail, round: number): IterationRow | null {
  const index = detail.selected[String(round)];
  if (index === undefined) return null;
  return detail.iterations.find((it) => it.round === round && it.index === index) ?? null;
}

export function selectedRounds(detail: SessionDetail): number[] {
  return Object.keys(detail.selected)
    .map(Number)
    .sort((a, b) => a - b);
}

function latestRound(detail: SessionDetail): number | null {
  const rounds = selectedRounds(detail);
  return rounds.length ? rounds[rounds.length - 1]! : null;
}

function goalTable(checks: GoalCheckRow[]): string {
  const rows = checks
    .map((c) => {
      const mark = c.passed ? `<span class="mark pass">✓</span>` : `<span class="mark fail">✗</span>`;
      return `<tr class="goal-row ${c.passed ? "pass" : "fail"}" data-metric="${escapeHtml(c.metric)}">
        <td>${metricLabel(c.metric)}</td>
        <td class="mono">${escapeHtml(c.comparator)} ${c.threshold} ${escapeHtml(c.units)}</td>
        <td class="mono">${formatValue(c.value)}</td>
        <td>${mark}</td>
      </tr>`;
    })
    .join("\n");
  return `<table class="goals">
    <thead><tr><th>Goal</th><th>Threshold</th><th>Value</th><th></th></tr></thead>
    <tbody>${rows}</tbody>
  </table>`;
}

function metricCards(metrics: MetricsFlat): string {
  const order = ["coverage", "dmax", "ci", "gi", "v12"];
  return order
    .map((metric) => {
      const unit = METRIC_UNITS[metric] ?? "";
      return `<div class="card" data-metric="${metric}">
        <div class="card-label">${metricLabel(metric)}</div>
        <div class="card-value">${formatValue(metrics[metric])}<span class="unit">${unit}</span></div>
      </div>`;
    })
    .join("\n");
}

function roundComparison(detail: SessionDetail): string {
  const rounds = selectedRounds(detail);
  if (rounds.length < 2) return "";
  const records = rounds.map((r) => [r, selectedRecord(detail, r)] as const);
  const metrics = ["coverage", "dmax", "ci", "gi", "v12"];
  const header = records.map(([r]) => `<th>Round ${r}</th>`).join("");
  const body = metrics
    .map((metric) => {
      const cells = records
        .map(([r, rec]) => `<td class="mono" data-round="${r}" data-metric="${metric}">${formatValue(rec?.metrics?.[metric])}</td>`)
        .join("");
      return `<tr><td>${metricLabel(metric)}</td>${cells}</tr>`;
    })
    .join("\n");
  return `<section class="panel" id="round-comparison">
    <h2>Rounds</h2>
    <table class="compare"><thead><tr><th>Metric</th>${header}</tr></thead><tbody>${body}</tbody></table>
  </section>`;
}

function iterationLog(detail: SessionDetail): string {
  const entries = detail.iterations
    .map((it) => {
      const marker = it.format_error
        ? `<div class="format-error">Malformed reply: ${escapeHtml(it.format_error_message ?? "")}</div>`
        : "";
      const objectives = it.objectives
        ? `<table class="objectives"><thead><tr><th>Structure</th><th>Kind</th><th>Dose Gy</th><th>Vol %</th><th>Priority</th></tr></thead><tbody>${it.objectives
            .map(
              (o) =>
                `<tr><td>${escapeHtml(o.structure)}</td><td>${escapeHtml(o.kind)}</td><td class="mono">${o.dose_gy}</td><td class="mono">${o.volume_pct}</td><td class="mono">${o.priority}</td></tr>`,
            )
            .join("")}</tbody></table>`
        : "";
      const metricsLine = it.metrics
        ? `<div class="iteration-metrics mono">coverage ${formatValue(it.metrics["coverage"], 1)}% · Dmax ${formatValue(it.metrics["dmax"])} Gy · CI ${formatValue(it.metrics["ci"])} · GI ${formatValue(it.metrics["gi"])} · V12 ${formatValue(it.metrics["v12"])} cc</div>`
        : "";
      return `<article class="iteration ${it.format_error ? "has-format-error" : ""}">
        <header><span class="round-tag">round ${it.round}</span> iteration ${it.index} <span class="duration">${it.duration_ms} ms</span></header>
        <div class="rationale">${highlightRationale(it.rationale)}</div>
        ${marker}
        ${objectives}
        ${metricsLine}
      </article>`;
    })
    .join("\n");
  return `<section class="panel" id="iteration-log"><h2>Planning dialogue</h2>${entries}</section>`;
}

function dvhSection(detail: SessionDetail): string {
  const rounds = Object.keys(detail.dvh).sort();
  if (rounds.length === 0) return "";
  const charts = rounds
    .map((round) => {
      const curves = Object.values(detail.dvh[round] ?? {});
      return `<div class="dvh-round" data-round="${round}">
        <h3>Round ${round}</h3>
        ${dvhChartSvg(curves, { prescriptionGy: detail.prescription_gy })}
      </div>`;
    })
    .join("\n");
  return `<section class="panel" id="dvh-section"><h2>Dose-volume histograms</h2>${charts}</section>`;
}

function decisionsSection(detail: SessionDetail): string {
  if (detail.decisions.length === 0) return "";
  const rows = detail.decisions
    .map(
      (d) =>
        `<li><strong>${escapeHtml(d.verdict)}</strong> round ${d.round} by ${escapeHtml(d.reviewer_id)} at ${escapeHtml(d.timestamp)}${
          d.refinement_text ? `: “${escapeHtml(d.refinement_text)}”` : ""
        }</li>`,
    )
    .join("");
  return `<section class="panel" id="decisions"><h2>Decisions</h2><ul>${rows}</ul></section>`;
}

function reviewPanel(detail: SessionDetail, allPass: boolean): string {
  if (detail.status !== "AwaitingReview") {
    return `<section class="panel" id="review-panel"><h2>Review</h2>
      <p>This session is ${statusChip(detail.status)}; no decision pending.</p></section>`;
  }
  return `<section class="panel ${allPass ? "accept-emphasis" : "refine-emphasis"}" id="review-panel">
    <h2>Review</h2>
    <p class="hint">${
      allPass
        ? "All clinical goals pass; accept, or request one refinement round."
        : "Not all benchmarks are satisfied; a refinement round is recommended."
    }</p>
    <div class="review-actions">
      <button id="accept-button" class="button ${allPass ? "primary" : ""}">Accept plan</button>
    </div>
    <div class="refine-form">
      <label for="refine-text">Refinement request</label>
      <textarea id="refine-text" rows="3"></textarea>
      <div class="review-actions">
        <button id="refine-button" class="button ${allPass ? "" : "primary"}">Request refinement</button>
        <span id="refine-progress" class="progress" hidden>Planning the refinement round…</span>
      </div>
    </div>
  </section>`;
}

export function renderSessionDetail(detail: SessionDetail): string {
  const latest = latestRound(detail);
  const record = latest === null ? null : selectedRecord(detail, latest);
  const checks = record?.goal_check ?? [];
  const allPass = checks.length > 0 && checks.every((c) => c.passed);
  const cards = record?.metrics ? `<div class="cards">${metricCards(record.metrics)}</div>` : "";
  const goals =
    checks.length > 0
      ? goalTable(checks)
      : `<p class="empty">No evaluated plan yet.</p>`;
  return `<a class="back" href="#/">← All sessions</a>
<header class="detail-header">
  <h1 class="mono">${escapeHtml(detail.id)}</h1>
  ${statusChip(detail.status)}
  <span class="meta">case ${escapeHtml(detail.case_id)} · policy ${escapeHtml(detail.policy)} · round ${detail.round} · rx ${detail.prescription_gy} Gy</span>
</header>
${cards}
<section class="panel" id="goal-section"><h2>Clinical goals${latest === null ? "" : ` (round ${latest})`}</h2>${goals}</section>
${roundComparison(detail)}
${reviewPanel(detail, allPass)}
${dvhSection(detail)}
${iterationLog(detail)}
${decisionsSection(detail)}`;
}

// ---------------------------------------------------------------------------
// Error state
// ---------------------------------------------------------------------------

export function renderError(message: string): string {
  return `<section class="panel error-state"><h1>Something went wrong</h1><p>${escapeHtml(message)}</p>
  <a class="back" href="#/">← All sessions</a></section>`;
}
