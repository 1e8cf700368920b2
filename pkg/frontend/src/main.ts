/**
 * Entry point: resolve rater and optional session id from the URL
 * (?rater=...&session=...), open the session, and wire keyboard input.
 */

import { StudyApi } from "./api.js";
import { openSession } from "./session.js";
import { StudyApp } from "./app.js";

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const rater = params.get("rater") ?? "anonymous";
  const sessionId = params.get("session") ?? undefined;

  const api = new StudyApi("");
  const session = await openSession(api, rater, sessionId);
  // Keep the session id in the URL so a reload resumes.
  params.set("session", session.sessionId);
  window.history.replaceState(null, "", `?${params.toString()}`);

  const root = document.getElementById("app");
  if (!root) {
    throw new Error("missing #app container");
  }
  const app = new StudyApp(root, api, session);
  app.mount();
  document.addEventListener("keydown", (ev) => app.handleKey(ev.key));
}

void boot();
