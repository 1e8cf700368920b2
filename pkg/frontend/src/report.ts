/**
 * Report formatting. Every number shown comes verbatim from
 * /api/report — the client formats, it never recomputes.
 */

import { Report } from "./api.js";

export interface ReportLine {
  label: string;
  value: string;
}

/** Fixed 4-decimal rendering so displayed values round-trip in tests. */
export function formatFraction(value: number | null): string {
  return value === null ? "n/a" : value.toFixed(4);
}

export function reportLines(report: Report): ReportLine[] {
  const lines: ReportLine[] = [];
  for (const [name, row] of Object.entries(report.rows)) {
    lines.push({ label: `${name} / n_responses`, value: String(row.n_responses) });
    lines.push({
      label: `${name} / rim_lesion_fraction`,
      value: formatFraction(row.rim_lesion_fraction),
    });
    lines.push({
      label: `${name} / real_image_fraction`,
      value: formatFraction(row.real_image_fraction),
    });
  }
  for (const [pair, entry] of Object.entries(report.kappa)) {
    lines.push({ label: `kappa ${pair} / n_items`, value: String(entry.n_items) });
    lines.push({
      label: `kappa ${pair} / rim_kappa`,
      value: formatFraction(entry.rim_kappa),
    });
    lines.push({
      label: `kappa ${pair} / real_kappa`,
      value: formatFraction(entry.real_kappa),
    });
  }
  return lines;
}
