import { beforeEach, describe, expect, it } from "vitest";

import { StudyApi } from "../src/api.js";
import { StudySession } from "../src/session.js";
import { StudyApp } from "../src/app.js";
import { reportLines } from "../src/report.js";
import { FakeServer } from "./fakes.js";

const N_ITEMS = 110; // one full study session

function items(n: number): string[] {
  return Array.from({ length: n }, (_, i) =>
    `item-${String(i).padStart(4, "0")}`
  );
}

function mountApp(server: FakeServer) {
  const root = document.createElement("div");
  document.body.appendChild(root);
  const api = new StudyApi("", server.fetch);
  const session = new StudySession(api, "s1", server.items, "r1");
  const app = new StudyApp(root, api, session);
  app.mount();
  return { root, app, session };
}

/** Grade the current item via keyboard, waiting out the async submit. */
async function gradeOne(app: StudyApp, rim: boolean, real: boolean) {
  app.handleKey(rim ? "r" : "n");
  app.handleKey(real ? "e" : "s");
  app.handleKey("Enter");
  await new Promise((resolve) => setTimeout(resolve, 0));
}

beforeEach(() => {
  document.body.innerHTML = "";
});

describe("StudyApp", () => {
  it("completes a scripted 110-item session", async () => {
    const server = new FakeServer(items(N_ITEMS));
    const { root, app, session } = mountApp(server);

    for (let i = 0; i < N_ITEMS; i++) {
      expect(session.current()).toBe(server.items[i]);
      await gradeOne(app, i % 2 === 0, i % 3 === 0);
    }
    expect(server.responses).toHaveLength(N_ITEMS);
    expect(session.isComplete()).toBe(true);
    expect(root.querySelector("#progress")?.textContent).toBe(
      `${N_ITEMS}/${N_ITEMS} graded`
    );
    // Completion unlocks the report view.
    expect(root.querySelector<HTMLElement>("#report")?.hidden).toBe(false);
  });

  it("shows the patch at 4x nearest-neighbor zoom", () => {
    const server = new FakeServer(items(3));
    const { root } = mountApp(server);
    const img = root.querySelector<HTMLImageElement>("#patch")!;
    expect(img.width).toBe(256);
    expect(img.height).toBe(256);
    expect(img.style.imageRendering).toBe("pixelated");
    expect(img.src).toContain("/api/item/item-0000/image");
  });

  it("requires both answers before Enter submits", async () => {
    const server = new FakeServer(items(2));
    const { app, session } = mountApp(server);
    app.handleKey("r");
    app.handleKey("Enter");
    await new Promise((resolve) => setTimeout(resolve, 0));
    expect(session.current()).toBe("item-0000");
    app.handleKey("s");
    app.handleKey("Enter");
    await new Promise((resolve) => setTimeout(resolve, 0));
    expect(session.current()).toBe("item-0001");
    expect(server.responses[0].rim_judgment).toBe(true);
    expect(server.responses[0].real_judgment).toBe(false);
  });

  it("surfaces failed posts with a retry control", async () => {
    const server = new FakeServer(items(2));
    const { root, app, session } = mountApp(server);
    server.failNextPosts = 1;
    await gradeOne(app, true, true);
    const retry = root.querySelector<HTMLElement>("#retry")!;
    expect(retry.hidden).toBe(false);
    expect(root.querySelector("#retry-count")?.textContent).toBe("1");

    root.querySelector<HTMLButtonElement>("#retry-button")!.click();
    await new Promise((resolve) => setTimeout(resolve, 0));
    expect(session.stateOf("item-0000")).toBe("confirmed");
    expect(retry.hidden).toBe(true);
  });

  it("renders the report view verbatim from /api/report", async () => {
    const server = new FakeServer(items(2));
    server.report.rows.real_rims = {
      n_responses: 2,
      rim_lesion_fraction: 1.0,
      real_image_fraction: 0.5,
    };
    server.report.kappa["r1|r2"] = {
      n_items: 2,
      rim_kappa: 0.5,
      real_kappa: null,
    };
    const { root, app } = mountApp(server);
    await gradeOne(app, true, true);
    await gradeOne(app, false, false);
    await new Promise((resolve) => setTimeout(resolve, 0));

    const cells = [...root.querySelectorAll(".report-value")].map(
      (td) => td.textContent
    );
    expect(cells).toEqual(reportLines(server.report).map((l) => l.value));
  });

  it("blinding audit: no source labels in payloads or DOM", async () => {
    const server = new FakeServer(items(5));
    const { root, app } = mountApp(server);
    for (let i = 0; i < 5; i++) {
      await gradeOne(app, true, false);
    }
    for (const posted of server.responses) {
      expect(Object.keys(posted).sort()).toEqual([
        "item_id",
        "rater_id",
        "real_judgment",
        "rim_judgment",
        "session_id",
      ]);
    }
    // No element carries a source field or a per-item truth label; the
    // words real/synthetic may only appear as the static question text.
    expect(root.innerHTML).not.toContain("source");
    for (const el of root.querySelectorAll("*")) {
      for (const attr of el.attributes) {
        expect(attr.name).not.toContain("source");
        expect(attr.value).not.toMatch(/^(real|synthetic)$/);
      }
    }
  });
});
