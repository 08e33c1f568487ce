// Console state and its single reducer.
//
// Every change to what the page shows funnels through reduce(): bridge
// frames, UI intents, socket lifecycle, clock ticks. The reducer is pure;
// it returns the next state plus any frames to send, and rendering is a
// plain function of the state it returns. Two invariants carry the rest
// of the design:
//
//   - `pending` is recomputed from `entries` on every change, so it always
//     holds exactly the entries the console knows with a null verdict.
//   - no branch writes a verdict into an entry except on a server
//     acknowledgment (decision_ack or a record carried by notify /
//     history_response). Clicking grant marks the decision in-flight and
//     disables the buttons; the badge stays "pending" until the server
//     answers. That is deliberate: the one action that opens a door is the
//     worst place for optimistic UI.

import type {
  EntryWire, FaultWire, Outbound, ServerMessage, SettingsWire, Verdict,
} from "./wire.js";

export type Connection = "connecting" | "live" | "lost";

export interface Notice {
  id: number;
  text: string;
  tone: "info" | "warn" | "error";
}

export type View =
  | { name: "timeline" }
  | { name: "entry"; entryId: number }
  | { name: "settings" };

export interface ConsoleState {
  connection: Connection;
  authFailed: boolean;
  /** Server settings snapshot; null until the first hello_ack. */
  settings: SettingsWire | null;
  /** A settings_update is awaiting its ack; inputs are disabled meanwhile. */
  settingsBusy: boolean;
  /** Every record learned over the bridge, by entry id. */
  entries: Record<number, EntryWire>;
  /** Exactly the undecided entries in `entries`, ascending id. */
  pending: number[];
  /** Decisions sent but not yet acknowledged, by entry id. */
  inflight: Record<number, Verdict>;
  /** Live (non-replay) alerts the user has not opened yet, oldest first. */
  alerts: number[];
  view: View;
  /** Timeline row currently expanded inline, if any. */
  expandedId: number | null;
  notices: Notice[];
  noticeSeq: number;
  /** Latest fault report per component, until dismissed. */
  faults: Record<string, FaultWire>;
  /** Entry ids whose picture fetch came back 404. */
  brokenImages: number[];
  /** received_at watermark for the newest-first history walk: everything
   * at or above it has been requested already. */
  historyCursor: number | null;
  historyDone: boolean;
  /** One tag per outstanding history_request, oldest first. The server
   * answers them in order on the one socket, so this tells walk pages
   * apart from single-record refreshes. */
  historyFifo: ("walk" | "spot")[];
  /** Client clock, drives the age display for undecided entries. */
  nowMs: number;
}

export type ConsoleEvent =
  | { kind: "ws-open" }
  | { kind: "ws-message"; message: ServerMessage }
  | { kind: "ws-closed" }
  | { kind: "ui-decide"; entryId: number; verdict: Verdict }
  | { kind: "ui-open-entry"; entryId: number }
  | { kind: "ui-open-timeline" }
  | { kind: "ui-open-settings" }
  | { kind: "ui-expand"; entryId: number }
  | { kind: "ui-toggle"; field: "service_enabled" | "do_not_disturb" }
  | { kind: "ui-channel"; channel: string; enabled: boolean }
  | { kind: "ui-load-more" }
  | { kind: "ui-refresh" }
  | { kind: "ui-dismiss-notice"; id: number }
  | { kind: "ui-dismiss-fault"; component: string }
  | { kind: "image-missing"; entryId: number }
  | { kind: "tick"; nowMs: number };

export interface Step {
  state: ConsoleState;
  send: Outbound[];
}

export const HISTORY_PAGE = 200;
const MAX_MS = Number.MAX_SAFE_INTEGER;
const NOTICE_LIMIT = 6;

export function initialState(nowMs: number): ConsoleState {
  return {
    connection: "connecting",
    authFailed: false,
    settings: null,
    settingsBusy: false,
    entries: {},
    pending: [],
    inflight: {},
    alerts: [],
    view: { name: "timeline" },
    expandedId: null,
    notices: [],
    noticeSeq: 0,
    faults: {},
    brokenImages: [],
    historyCursor: null,
    historyDone: false,
    historyFifo: [],
    nowMs,
  };
}

function pendingOf(entries: Record<number, EntryWire>): number[] {
  return Object.values(entries)
    .filter((e) => e.access_granted === null)
    .map((e) => e.entry_id)
    .sort((a, b) => a - b);
}

/** Merge a server-sourced record. The store never un-decides an entry, so a
 * stale null from an in-flight history response must not displace a verdict
 * we already acknowledged. */
function mergeEntry(
  entries: Record<number, EntryWire>, incoming: EntryWire,
): Record<number, EntryWire> {
  const prior = entries[incoming.entry_id];
  if (prior && prior.access_granted !== null && incoming.access_granted === null) {
    return entries;
  }
  return { ...entries, [incoming.entry_id]: incoming };
}

function withNotice(
  state: ConsoleState, tone: Notice["tone"], text: string,
): ConsoleState {
  const id = state.noticeSeq + 1;
  const notices = [...state.notices, { id, text, tone }].slice(-NOTICE_LIMIT);
  return { ...state, notices, noticeSeq: id };
}

function fullRefresh(): Outbound {
  return { type: "history_request", from_ms: 0, to_ms: MAX_MS, limit: HISTORY_PAGE };
}

function without<T>(xs: T[], x: T): T[] {
  return xs.includes(x) ? xs.filter((y) => y !== x) : xs;
}

function dropInflight(
  inflight: Record<number, Verdict>, entryId: number,
): Record<number, Verdict> {
  if (!(entryId in inflight)) return inflight;
  const next = { ...inflight };
  delete next[entryId];
  return next;
}

export function reduce(state: ConsoleState, ev: ConsoleEvent): Step {
  switch (ev.kind) {
    case "ws-open":
      return { state: { ...state, connection: "connecting" }, send: [] };

    case "ws-closed": {
      let next = state;
      for (const id of Object.keys(state.inflight)) {
        next = withNotice(next, "warn",
          `connection lost before entry ${id}'s decision was confirmed; ` +
          "it is still shown as pending - retry once reconnected");
      }
      if (state.settingsBusy) {
        next = withNotice(next, "warn",
          "connection lost before the settings change was confirmed");
      }
      return {
        state: {
          ...next, connection: "lost", inflight: {},
          settingsBusy: false, historyFifo: [],
        },
        send: [],
      };
    }

    case "ws-message":
      return onServer(state, ev.message);

    case "ui-decide": {
      if (state.connection !== "live") {
        return {
          state: withNotice(state, "warn", "not connected; the decision was not sent"),
          send: [],
        };
      }
      const rec = state.entries[ev.entryId];
      if (!rec || rec.access_granted !== null || ev.entryId in state.inflight) {
        return { state, send: [] };
      }
      return {
        state: { ...state, inflight: { ...state.inflight, [ev.entryId]: ev.verdict } },
        send: [{ type: "decision", entry_id: ev.entryId, verdict: ev.verdict }],
      };
    }

    case "ui-open-entry":
      return {
        state: {
          ...state,
          view: { name: "entry", entryId: ev.entryId },
          alerts: without(state.alerts, ev.entryId),
        },
        send: [],
      };

    case "ui-open-timeline":
      return { state: { ...state, view: { name: "timeline" } }, send: [] };

    case "ui-open-settings":
      return { state: { ...state, view: { name: "settings" } }, send: [] };

    case "ui-expand":
      return {
        state: {
          ...state,
          expandedId: state.expandedId === ev.entryId ? null : ev.entryId,
          alerts: without(state.alerts, ev.entryId),
        },
        send: [],
      };

    case "ui-toggle":
    case "ui-channel": {
      if (state.connection !== "live" || state.settings === null) {
        return {
          state: withNotice(state, "warn", "not connected; settings unchanged"),
          send: [],
        };
      }
      if (state.settingsBusy) return { state, send: [] };
      const edited = editSettings(state.settings, ev);
      return {
        state: { ...state, settingsBusy: true },
        send: [{ type: "settings_update", settings: edited }],
      };
    }

    case "ui-load-more":
      if (state.connection !== "live" || state.historyDone) {
        return { state, send: [] };
      }
      return {
        state: { ...state, historyFifo: [...state.historyFifo, "walk"] },
        send: [{
          type: "history_request",
          from_ms: 0,
          to_ms: state.historyCursor ?? MAX_MS,
          limit: HISTORY_PAGE,
        }],
      };

    case "ui-refresh":
      if (state.connection !== "live") return { state, send: [] };
      return {
        state: {
          ...state,
          historyCursor: null,
          historyDone: false,
          historyFifo: [...state.historyFifo, "walk"],
        },
        send: [fullRefresh()],
      };

    case "ui-dismiss-notice":
      return {
        state: { ...state, notices: state.notices.filter((n) => n.id !== ev.id) },
        send: [],
      };

    case "ui-dismiss-fault": {
      const faults = { ...state.faults };
      delete faults[ev.component];
      return { state: { ...state, faults }, send: [] };
    }

    case "image-missing":
      if (state.brokenImages.includes(ev.entryId)) return { state, send: [] };
      return {
        state: { ...state, brokenImages: [...state.brokenImages, ev.entryId] },
        send: [],
      };

    case "tick":
      return { state: { ...state, nowMs: ev.nowMs }, send: [] };
  }
}

function editSettings(
  current: SettingsWire,
  ev: { kind: "ui-toggle"; field: "service_enabled" | "do_not_disturb" }
    | { kind: "ui-channel"; channel: string; enabled: boolean },
): SettingsWire {
  if (ev.kind === "ui-toggle") {
    return { ...current, [ev.field]: !current[ev.field] };
  }
  const channels = new Set(current.alert_channels);
  if (ev.enabled) channels.add(ev.channel);
  else channels.delete(ev.channel);
  return { ...current, alert_channels: [...channels].sort() };
}

function onServer(state: ConsoleState, msg: ServerMessage): Step {
  switch (msg.type) {
    case "hello_ack": {
      // The server replays every still-undecided entry right after this
      // ack. Locally-known undecided records are dropped here and
      // re-learned from that replay, so after the burst `pending` matches
      // the server's view exactly even if verdicts landed while we were
      // away. Decided records are facts and stay for the timeline.
      const entries: Record<number, EntryWire> = {};
      for (const e of Object.values(state.entries)) {
        if (e.access_granted !== null) entries[e.entry_id] = e;
      }
      return {
        state: {
          ...state,
          connection: "live",
          settings: msg.settings,
          settingsBusy: false,
          entries,
          pending: pendingOf(entries),
          alerts: [],
          inflight: {},
          historyCursor: null,
          historyDone: false,
          historyFifo: ["walk"],
        },
        send: [fullRefresh()],
      };
    }

    case "notify": {
      const entries = mergeEntry(state.entries, msg.entry);
      const rec = entries[msg.entry.entry_id];
      let alerts = state.alerts;
      // Replayed notifies rebuild the pending board without re-ringing it;
      // only a fresh press earns an alert.
      if (!msg.replay && rec && rec.access_granted === null
          && !alerts.includes(rec.entry_id)) {
        alerts = [...alerts, rec.entry_id];
      }
      return {
        state: { ...state, entries, pending: pendingOf(entries), alerts },
        send: [],
      };
    }

    case "decision_ack": {
      const rec = state.entries[msg.entry_id];
      if (!rec) {
        // A verdict for an entry we never learned; the history walk will
        // surface the full record if the user scrolls to it.
        return { state, send: [] };
      }
      const entries = {
        ...state.entries,
        [msg.entry_id]: {
          ...rec,
          access_granted: (msg.verdict === "granted" ? "yes" : "no") as "yes" | "no",
          decided_at: msg.decided_at,
        },
      };
      return {
        state: {
          ...state,
          entries,
          pending: pendingOf(entries),
          inflight: dropInflight(state.inflight, msg.entry_id),
          alerts: without(state.alerts, msg.entry_id),
        },
        send: [],
      };
    }

    case "settings_ack":
      return {
        state: { ...state, settings: msg.settings, settingsBusy: false },
        send: [],
      };

    case "history_response": {
      let entries = state.entries;
      let fresh = 0;
      for (const e of msg.entries) {
        if (!(e.entry_id in entries)) fresh += 1;
        entries = mergeEntry(entries, e);
      }
      const [kind, ...historyFifo] = state.historyFifo;
      let cursor = state.historyCursor;
      let done = state.historyDone;
      // Only walk pages move the paging watermark; spot refreshes (for
      // example after an already-decided error) just merge records.
      if (kind !== "spot") {
        if (msg.entries.length < HISTORY_PAGE) {
          // Pages are the newest `limit` records in range, so a short one
          // means the rest of the range fit: the walk is complete.
          done = true;
        } else {
          const minAt = Math.min(...msg.entries.map((e) => e.received_at));
          // Re-request the boundary millisecond so same-ms siblings are not
          // skipped, unless that page taught us nothing new (then step past
          // it to avoid stalling).
          cursor = fresh > 0 ? minAt : minAt - 1;
          done = cursor < 0;
        }
      }
      return {
        state: {
          ...state,
          entries,
          pending: pendingOf(entries),
          historyCursor: cursor,
          historyDone: done,
          historyFifo,
        },
        send: [],
      };
    }

    case "fault_report":
      return {
        state: {
          ...state,
          faults: {
            ...state.faults,
            [msg.component]: {
              component: msg.component, state: msg.state,
              detail: msg.detail, at: msg.at,
            },
          },
        },
        send: [],
      };

    case "error":
      return onServerError(state, msg);
  }
}

function onServerError(
  state: ConsoleState,
  msg: { code: string; text: string; entry_id?: number },
): Step {
  switch (msg.code) {
    case "already-decided": {
      const id = msg.entry_id;
      let next = withNotice(state, "warn",
        id !== undefined
          ? `entry ${id} was already decided elsewhere; showing the server's verdict`
          : "that entry was already decided elsewhere");
      const send: Outbound[] = [];
      if (id !== undefined) {
        next = {
          ...next,
          inflight: dropInflight(next.inflight, id),
          historyFifo: [...next.historyFifo, "spot"],
        };
        const rec = state.entries[id];
        // Refresh the record so the verdict on screen is the server's.
        send.push(rec
          ? { type: "history_request", from_ms: rec.received_at, to_ms: rec.received_at, limit: 8 }
          : fullRefresh());
      }
      return { state: next, send };
    }

    case "no-such-entry": {
      let next = withNotice(state, "warn", `server does not know that entry (${msg.text})`);
      if (msg.entry_id !== undefined) {
        next = { ...next, inflight: dropInflight(next.inflight, msg.entry_id) };
      }
      return { state: next, send: [] };
    }

    case "storage-error":
      return {
        state: {
          ...withNotice(state, "error",
            `server storage trouble: ${msg.text}; nothing was saved - retry`),
          inflight: {},
          settingsBusy: false,
        },
        send: [],
      };

    case "auth-failure":
      return {
        state: {
          ...withNotice(state, "error",
            "the server rejected the access token; check the token and reload"),
          authFailed: true,
        },
        send: [],
      };

    default:
      return {
        state: withNotice(state, "warn", `server error ${msg.code}: ${msg.text}`),
        send: [],
      };
  }
}
