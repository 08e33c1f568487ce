// Message shapes as they cross the WebSocket bridge. The bridge relays the
// owner channel verbatim, so these mirror the server's JSON frames; the only
// bridge-specific rule is that the very first client frame is the bare
// 64-hex token, which the bridge expands into a hello on our behalf.

export type Tri = "yes" | "no" | null;
export type Verdict = "granted" | "denied";

export const ALERT_CHANNELS = ["email", "ringer", "text"] as const;

export interface EntryWire {
  entry_id: number;
  received_at: number;
  pressed_at: number;
  camera_fault: boolean;
  access_granted: Tri;
  image_url?: string;
  decided_at?: number;
}

export interface SettingsWire {
  service_enabled: boolean;
  do_not_disturb: boolean;
  alert_channels: string[];
}

export interface FaultWire {
  component: string;
  state: string;
  detail: string;
  at: number;
}

export type ServerMessage =
  | { type: "hello_ack"; seq: number; role: string; settings: SettingsWire }
  | { type: "notify"; seq: number; entry: EntryWire; replay: boolean }
  | { type: "decision_ack"; seq: number; entry_id: number; verdict: Verdict; decided_at: number }
  | { type: "settings_ack"; seq: number; settings: SettingsWire }
  | { type: "history_response"; seq: number; entries: EntryWire[] }
  | { type: "fault_report"; seq: number; component: string; state: string; detail: string; at: number }
  | { type: "error"; seq: number; code: string; text: string; entry_id?: number };

// Outbound frames; seq is stamped by the socket layer just before send.
export type Outbound =
  | { type: "decision"; entry_id: number; verdict: Verdict }
  | { type: "settings_update"; settings: SettingsWire }
  | { type: "history_request"; from_ms: number; to_ms: number; limit: number };

const SERVER_TYPES = new Set([
  "hello_ack", "notify", "decision_ack", "settings_ack",
  "history_response", "fault_report", "error",
]);

/** Parse one bridge frame. Unknown or malformed frames return null; the
 * server is trusted for field-level details beyond the type tag. */
export function parseServer(raw: string): ServerMessage | null {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof data !== "object" || data === null) return null;
  const type = (data as { type?: unknown }).type;
  if (typeof type !== "string" || !SERVER_TYPES.has(type)) return null;
  return data as ServerMessage;
}
