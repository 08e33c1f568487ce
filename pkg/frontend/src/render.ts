// HTML for the whole page as a pure function of ConsoleState. No DOM reads,
// no timers, no fetches: interactive elements carry their reducer event in a
// data-ev attribute and main.ts turns clicks back into dispatches.

import type { ConsoleState } from "./state.js";
import type { ConsoleEvent } from "./state.js";
import type { EntryWire } from "./wire.js";
import { ALERT_CHANNELS } from "./wire.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

function ev(event: ConsoleEvent): string {
  return escapeHtml(JSON.stringify(event));
}

/** Epoch-looking stamps render as UTC wall time; anything smaller is a
 * scenario offset and renders as raw milliseconds. */
export function fmtStamp(ms: number): string {
  if (ms >= 1e12) {
    return new Date(ms).toISOString().replace("T", " ").slice(0, 19) + "Z";
  }
  return `+${ms} ms`;
}

export function fmtAge(deltaMs: number): string {
  const s = Math.max(0, Math.floor(deltaMs / 1000));
  if (s < 60) return `${s}s`;
  if (s < 3600) return `${Math.floor(s / 60)}m ${s % 60}s`;
  return `${Math.floor(s / 3600)}h ${Math.floor((s % 3600) / 60)}m`;
}

function badge(rec: EntryWire): string {
  const label = rec.access_granted === "yes" ? "granted"
    : rec.access_granted === "no" ? "denied" : "pending";
  return `<span class="badge badge-${label}">${label}</span>`;
}

function pictureBlock(state: ConsoleState, rec: EntryWire, httpBase: string): string {
  if (rec.camera_fault) {
    return `<div class="no-picture">no picture (camera fault at capture time)</div>`;
  }
  if (state.brokenImages.includes(rec.entry_id)) {
    return `<div class="no-picture">no picture (not found on the server)</div>`;
  }
  if (rec.image_url === undefined) {
    return `<div class="no-picture">no picture</div>`;
  }
  const src = `${httpBase}/images/${rec.entry_id}.png`;
  return `<img class="visitor" src="${escapeHtml(src)}"`
    + ` data-entry="${rec.entry_id}" alt="visitor at entry ${rec.entry_id}">`;
}

function controls(state: ConsoleState, rec: EntryWire): string {
  if (rec.access_granted !== null) return "";
  if (rec.entry_id in state.inflight) {
    return `<div class="controls">
      <button disabled>grant</button>
      <button disabled>deny</button>
      <span class="hint">decision sent, awaiting the server</span>
    </div>`;
  }
  return `<div class="controls">
    <button class="grant" data-ev='${ev({ kind: "ui-decide", entryId: rec.entry_id, verdict: "granted" })}'>grant</button>
    <button class="deny" data-ev='${ev({ kind: "ui-decide", entryId: rec.entry_id, verdict: "denied" })}'>deny</button>
  </div>`;
}

function detail(state: ConsoleState, rec: EntryWire, httpBase: string): string {
  const rows = [
    `<dt>pressed</dt><dd>${fmtStamp(rec.pressed_at)}</dd>`,
    `<dt>received</dt><dd>${fmtStamp(rec.received_at)}</dd>`,
  ];
  if (rec.decided_at !== undefined) {
    rows.push(`<dt>decided</dt><dd>${fmtStamp(rec.decided_at)}</dd>`);
  } else {
    // No decision timeout exists; an entry may stay undecided forever, so
    // show how long it has been waiting instead of pretending otherwise.
    rows.push(`<dt>waiting</dt><dd>${fmtAge(state.nowMs - rec.pressed_at)}</dd>`);
  }
  if (rec.camera_fault) {
    rows.push(`<dt>camera</dt><dd>fault reported at capture</dd>`);
  }
  return `<div class="detail">
    ${pictureBlock(state, rec, httpBase)}
    <dl>${rows.join("")}</dl>
    ${badge(rec)}
    ${controls(state, rec)}
  </div>`;
}

function timelineView(state: ConsoleState, httpBase: string): string {
  const recs = Object.values(state.entries)
    .sort((a, b) => (b.received_at - a.received_at) || (b.entry_id - a.entry_id));
  if (recs.length === 0) {
    return `<p class="empty">No visits yet. When somebody presses the bell,
      the entry shows up here.</p>`;
  }
  const rows = recs.map((rec) => {
    const open = state.expandedId === rec.entry_id;
    return `<li class="row${open ? " open" : ""}">
      <div class="row-head" data-ev='${ev({ kind: "ui-expand", entryId: rec.entry_id })}'>
        ${badge(rec)}
        <span class="row-title">entry ${rec.entry_id}</span>
        <span class="row-time">${fmtStamp(rec.pressed_at)}</span>
        ${rec.camera_fault ? `<span class="row-fault">camera fault</span>` : ""}
      </div>
      ${open ? detail(state, rec, httpBase) : ""}
    </li>`;
  });
  const more = state.historyDone ? ""
    : `<button class="more" data-ev='${ev({ kind: "ui-load-more" })}'>load older entries</button>`;
  return `<ol class="timeline">${rows.join("")}</ol>
    <div class="timeline-foot">
      <button data-ev='${ev({ kind: "ui-refresh" })}'>refresh</button>
      ${more}
    </div>`;
}

function entryView(state: ConsoleState, entryId: number, httpBase: string): string {
  const rec = state.entries[entryId];
  const back = `<button data-ev='${ev({ kind: "ui-open-timeline" })}'>back to timeline</button>`;
  if (!rec) {
    return `${back}<p class="empty">entry ${entryId} is no longer known here;
      refresh the timeline to look it up.</p>`;
  }
  return `${back}<h2>entry ${rec.entry_id}</h2>${detail(state, rec, httpBase)}`;
}

function settingsView(state: ConsoleState): string {
  const s = state.settings;
  if (s === null) {
    return `<p class="empty">waiting for the server's settings snapshot</p>`;
  }
  const off = state.settingsBusy || state.connection !== "live";
  const dis = off ? " disabled" : "";
  const box = (checked: boolean) => (checked ? " checked" : "");
  const channel = (name: string) => `<label class="channel">
      <input type="checkbox" data-channel="${name}"${box(s.alert_channels.includes(name))}${dis}>
      ${name}
    </label>`;
  return `<form class="settings" onsubmit="return false">
    <label>
      <input type="checkbox" data-setting="service_enabled"${box(s.service_enabled)}${dis}>
      service enabled (when off: no alerts, no history, the bell is dead)
    </label>
    <label>
      <input type="checkbox" data-setting="do_not_disturb"${box(s.do_not_disturb)}${dis}>
      do not disturb (visits are recorded but nothing rings)
    </label>
    <fieldset>
      <legend>alert channels</legend>
      ${ALERT_CHANNELS.map(channel).join("")}
    </fieldset>
    <p class="hint">${state.settingsBusy
      ? "waiting for the server to confirm the change"
      : "changes take effect once the server confirms them"}</p>
  </form>`;
}

function header(state: ConsoleState): string {
  const tab = (label: string, e: ConsoleEvent, active: boolean) =>
    `<button class="tab${active ? " active" : ""}" data-ev='${ev(e)}'>${label}</button>`;
  return `<header>
    <h1>dashbell</h1>
    <span class="conn conn-${state.connection}">${state.connection}</span>
    <span class="alert-count">${state.alerts.length}</span>
    <nav>
      ${tab("timeline", { kind: "ui-open-timeline" }, state.view.name !== "settings")}
      ${tab("settings", { kind: "ui-open-settings" }, state.view.name === "settings")}
    </nav>
  </header>`;
}

function alertBanner(state: ConsoleState): string {
  if (state.alerts.length === 0) return "";
  const id = state.alerts[state.alerts.length - 1]!;
  const rec = state.entries[id];
  const age = rec ? fmtAge(state.nowMs - rec.pressed_at) : "";
  return `<div class="alert-banner">
    visitor at the door (entry ${id}, ${age} ago)
    <button data-ev='${ev({ kind: "ui-open-entry", entryId: id })}'>view</button>
  </div>`;
}

function faultStrip(state: ConsoleState): string {
  const faults = Object.values(state.faults).sort((a, b) => b.at - a.at);
  if (faults.length === 0) return "";
  return `<div class="faults">${faults.map((f) => `
    <span class="fault-chip">
      ${escapeHtml(f.component)} ${escapeHtml(f.state)}
      (${escapeHtml(f.detail)}, ${fmtStamp(f.at)})
      <button data-ev='${ev({ kind: "ui-dismiss-fault", component: f.component })}'>x</button>
    </span>`).join("")}</div>`;
}

function noticeStack(state: ConsoleState): string {
  if (state.notices.length === 0) return "";
  return `<div class="notices">${state.notices.map((n) => `
    <div class="notice notice-${n.tone}">
      ${escapeHtml(n.text)}
      <button data-ev='${ev({ kind: "ui-dismiss-notice", id: n.id })}'>x</button>
    </div>`).join("")}</div>`;
}

export function renderApp(state: ConsoleState, httpBase: string): string {
  let body: string;
  switch (state.view.name) {
    case "timeline":
      body = timelineView(state, httpBase);
      break;
    case "entry":
      body = entryView(state, state.view.entryId, httpBase);
      break;
    case "settings":
      body = settingsView(state);
      break;
  }
  return `${header(state)}
    ${alertBanner(state)}
    ${faultStrip(state)}
    ${noticeStack(state)}
    <main>${body}</main>`;
}
