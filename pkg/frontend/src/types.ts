// Payload shapes of the review-service JSON API. Field names mirror the wire
// format exactly; everything here is read-only data.

export type SessionStatus = "Running" | "AwaitingReview" | "Accepted" | "Refined" | "Failed";

export type MetricsFlat = Record<string, number | null>;

export interface SessionSummary {
  id: string;
  case_id: string;
  status: SessionStatus;
  round: number;
  created_at: string;
  policy_name: string;
  selected_round: number | null;
  metrics: MetricsFlat | null;
  goals_passed: number | null;
  goals_total: number | null;
}

export interface SessionListResponse {
  sessions: SessionSummary[];
}

export interface GoalCheckRow {
  metric: string;
  comparator: string;
  threshold: number;
  units: string;
  value: number | null;
  passed: boolean;
}

export interface ObjectiveRow {
  structure: string;
  kind: string;
  dose_gy: number;
  volume_pct: number;
  priority: number;
}

export interface IterationRow {
  round: number;
  index: number;
  prompt_sha256: string;
  rationale: string;
  raw_output?: string;
  objectives: ObjectiveRow[] | null;
  format_error: boolean;
  format_error_message: string | null;
  metrics: MetricsFlat | null;
  goal_check: GoalCheckRow[] | null;
  duration_ms: number;
}

export interface DvhCurve {
  structure: string;
  bin_width_gy: number;
  thresholds_gy: number[];
  fractions: number[];
}

export interface StructureRow {
  name: string;
  role: string;
  volume_cc: number;
}

export interface DecisionRow {
  round: number;
  verdict: "Accept" | "Refine";
  reviewer_id: string;
  timestamp: string;
  refinement_text: string | null;
}

export interface GoalRow {
  metric: string;
  comparator: string;
  threshold: number;
  units: string;
}

export interface SessionDetail {
  id: string;
  case_id: string;
  policy: string;
  status: SessionStatus;
  round: number;
  round_outcomes: Record<string, string>;
  selected: Record<string, number>;
  goals: GoalRow[];
  refinement_text: string | null;
  created_at: string;
  iterations: IterationRow[];
  structures: StructureRow[];
  prescription_gy: number;
  dvh_bin_gy: number;
  dvh: Record<string, Record<string, DvhCurve>>;
  decisions: DecisionRow[];
  standard_refinement_text: string;
}

export type Verdict = "Accept" | "Refine";
