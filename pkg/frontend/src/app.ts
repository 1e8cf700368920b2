/**
 * Single-page grading flow.
 *
 * Layout: one 64x64 patch shown at 4x nearest-neighbor zoom, a
 * two-question form driven by keyboard shortcuts, a progress/retry
 * strip, and a report view unlocked when every response is confirmed.
 *
 * Keys: R = rim, N = non-rim; E = real, S = synthetic; Enter submits
 * once both questions are answered.
 */

import { StudyApi } from "./api.js";
import { StudySession } from "./session.js";
import { reportLines } from "./report.js";

const ZOOM = 4; // 64x64 is too small to grade unmagnified

export class StudyApp {
  private rim: boolean | null = null;
  private real: boolean | null = null;

  constructor(
    private readonly root: HTMLElement,
    private readonly api: StudyApi,
    private readonly session: StudySession
  ) {}

  mount(): void {
    this.root.innerHTML = `
      <div id="grading">
        <img id="patch" width="${64 * ZOOM}" height="${64 * ZOOM}"
             style="image-rendering: pixelated" alt="patch under review">
        <div id="questions">
          <p>Lesion type: <b>[R]</b>im / <b>[N]</b>on-rim
             <span id="rim-answer"></span></p>
          <p>Image origin: r<b>[E]</b>al / <b>[S]</b>ynthetic
             <span id="real-answer"></span></p>
          <p><b>[Enter]</b> submits</p>
        </div>
        <p id="progress"></p>
        <p id="retry" hidden>
          <span id="retry-count"></span> response(s) failed to send.
          <button id="retry-button">Retry</button>
        </p>
      </div>
      <div id="report" hidden><h2>Study report</h2><table></table></div>
    `;
    const retry = this.root.querySelector<HTMLButtonElement>("#retry-button");
    retry?.addEventListener("click", () => void this.retry());
    this.render();
  }

  /** Keyboard entry point; wired to document.onkeydown by main.ts. */
  handleKey(key: string): void {
    if (this.session.current() === null) {
      return;
    }
    const k = key.toLowerCase();
    if (k === "r") this.rim = true;
    if (k === "n") this.rim = false;
    if (k === "e") this.real = true;
    if (k === "s") this.real = false;
    if (k === "enter" && this.rim !== null && this.real !== null) {
      void this.submit();
      return;
    }
    this.render();
  }

  private async submit(): Promise<void> {
    const judgment = { rim: this.rim!, real: this.real! };
    this.rim = null;
    this.real = null;
    this.render(); // optimistic: next item appears before the POST lands
    await this.session.submit(judgment);
    this.render();
    if (this.session.isComplete()) {
      await this.showReport();
    }
  }

  private async retry(): Promise<void> {
    await this.session.retryFailed();
    this.render();
    if (this.session.isComplete()) {
      await this.showReport();
    }
  }

  private set(selector: string, text: string): void {
    const el = this.root.querySelector(selector);
    if (el) el.textContent = text;
  }

  render(): void {
    const item = this.session.current();
    const img = this.root.querySelector<HTMLImageElement>("#patch");
    if (img && item !== null) {
      img.src = this.api.imageUrl(item);
    }
    this.set("#rim-answer",
      this.rim === null ? "" : this.rim ? "rim" : "non-rim");
    this.set("#real-answer",
      this.real === null ? "" : this.real ? "real" : "synthetic");
    const { confirmed, failed, total } = this.session.progress();
    this.set("#progress", `${confirmed}/${total} graded`);
    const retryRow = this.root.querySelector<HTMLElement>("#retry");
    if (retryRow) {
      retryRow.hidden = failed === 0;
      this.set("#retry-count", String(failed));
    }
  }

  /** Fetch the server report and show it verbatim. */
  async showReport(): Promise<void> {
    const report = await this.api.report();
    const grading = this.root.querySelector<HTMLElement>("#grading");
    const view = this.root.querySelector<HTMLElement>("#report");
    if (grading) grading.hidden = true;
    if (view) {
      view.hidden = false;
      const table = view.querySelector("table");
      if (table) {
        table.innerHTML = reportLines(report)
          .map(
            (line) =>
              `<tr><td>${line.label}</td>` +
              `<td class="report-value">${line.value}</td></tr>`
          )
          .join("");
      }
    }
  }
}
