// Rationale-text highlighting. The categories and marker phrases mirror the
// service-side classifier so the log view highlights exactly what the
// analysis pipeline counts: phrase templates with word boundaries, a bounded
// word gap for "...", and short value slots for X/Y.

export const CATEGORIES = [
  "ProblemDecomposition",
  "ProspectiveVerification",
  "SelfCorrection",
  "MathematicalReasoning",
  "TradeOffDeliberation",
  "ForwardSimulation",
] as const;

export type Category = (typeof CATEGORIES)[number];

const TEMPLATE_GAP_WORDS = 12;
const VALUE_SLOT_TOKENS = 3;

export const MARKER_PHRASES: Record<Category, string[]> = {
  ProblemDecomposition: ["First", "then", "next", "I will start by"],
  ProspectiveVerification: [
    "If ... then",
    "would exceed",
    "checking whether",
    "to make sure V12Gy stays under",
  ],
  SelfCorrection: [
    "reverting",
    "instead",
    "previous attempt",
    "I will revise",
    "This assumption was incorrect",
  ],
  MathematicalReasoning: ["delta", "fraction", "greater than", "increase from X to Y"],
  TradeOffDeliberation: ["balance", "prioritize", "versus", "at the cost of"],
  ForwardSimulation: ["will cause", "expected to", "will result in"],
};

function escapeRegex(text: string): string {
  return text.replace(/[.*+?^${}()|[\]\\]/g, "\\$&");
}

export function patternToRegex(pattern: string): RegExp {
  const tokens = pattern.replace(/\.\.\./g, " ... ").split(/\s+/).filter(Boolean);
  if (tokens.length === 0) throw new Error("empty marker pattern");
  let body = "";
  tokens.forEach((token, i) => {
    if (token === "...") {
      body += `(?:\\W+\\w+){0,${TEMPLATE_GAP_WORDS}}?\\W+`;
    } else if (token === "X" || token === "Y") {
      body += `\\S+(?:\\s+\\S+){0,${VALUE_SLOT_TOKENS - 1}}?`;
      if (i < tokens.length - 1) body += "\\s+";
    } else {
      body += escapeRegex(token);
      if (i < tokens.length - 1 && tokens[i + 1] !== "...") body += "\\s+";
    }
  });
  return new RegExp(`\\b${body}\\b`, "i");
}

const COMPILED: Array<[Category, RegExp[]]> = CATEGORIES.map((category) => [
  category,
  MARKER_PHRASES[category].map(patternToRegex),
]);

export function categoriesOf(sentence: string): Category[] {
  if (!sentence.trim()) return [];
  const found: Category[] = [];
  for (const [category, regexes] of COMPILED) {
    if (regexes.some((r) => r.test(sentence))) found.push(category);
  }
  return found;
}

const ABBREVIATIONS = new Set(["e.g", "i.e", "vs", "etc", "cf", "dr", "fig", "no", "approx", "resp"]);

export function splitSentences(text: string): string[] {
  const sentences: string[] = [];
  for (const rawLine of text.split(/\r?\n/)) {
    const line = rawLine.trim();
    if (!line) continue;
    let start = 0;
    const ender = /[.!?]+(?=\s|$)/g;
    let match: RegExpExecArray | null;
    while ((match = ender.exec(line)) !== null) {
      const prefix = line.slice(start, match.index);
      const words = prefix.split(/\s+/).filter(Boolean);
      const lastWord = words.length ? words[words.length - 1]!.toLowerCase().replace(/\.+$/, "") : "";
      if (ABBREVIATIONS.has(lastWord)) continue;
      const sentence = line.slice(start, match.index + match[0].length).trim();
      if (sentence) sentences.push(sentence);
      start = match.index + match[0].length;
    }
    const tail = line.slice(start).trim();
    if (tail) sentences.push(tail);
  }
  return sentences;
}

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** Sentence-level highlighting: each sentence that carries markers becomes a
 * span classed with its categories (cat-ProblemDecomposition ...). */
export function highlightRationale(text: string): string {
  const parts = splitSentences(text).map((sentence) => {
    const cats = categoriesOf(sentence);
    const safe = escapeHtml(sentence);
    if (cats.length === 0) return safe;
    const classes = cats.map((c) => `cat-${c}`).join(" ");
    return `<span class="marked ${classes}" title="${cats.join(", ")}">${safe}</span>`;
  });
  return parts.join(" ");
}
