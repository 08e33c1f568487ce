// Browser entry point: the connect form, the dispatch loop, and the DOM
// event delegation. Everything interesting lives in state.ts/render.ts;
// this file is deliberately just wiring.

import { BridgeSocket } from "./bridge.js";
import type { SocketCtor } from "./bridge.js";
import { renderApp } from "./render.js";
import { initialState, reduce } from "./state.js";
import type { ConsoleEvent, ConsoleState } from "./state.js";

interface ConnectConfig {
  host: string;
  bridgePort: number;
  httpPort: number;
  token: string;
}

const STORAGE_KEY = "dashbell-console-config";

function savedConfig(): Partial<ConnectConfig> {
  try {
    return JSON.parse(localStorage.getItem(STORAGE_KEY) ?? "{}");
  } catch {
    return {};
  }
}

function boot(cfg: ConnectConfig): void {
  const app = document.getElementById("app")!;
  const httpBase = `http://${cfg.host}:${cfg.httpPort}`;
  let state: ConsoleState = initialState(Date.now());
  let socket: BridgeSocket | null = null;
  let backoffMs = 1000;

  const repaint = () => {
    app.innerHTML = renderApp(state, httpBase);
  };

  const dispatch = (ev: ConsoleEvent) => {
    const step = reduce(state, ev);
    state = step.state;
    for (const out of step.send) socket?.send(out);
    repaint();
  };

  const connect = () => {
    socket = new BridgeSocket(`ws://${cfg.host}:${cfg.bridgePort}/`, cfg.token, {
      onOpen: () => {
        backoffMs = 1000;
        dispatch({ kind: "ws-open" });
      },
      onMessage: (message) => dispatch({ kind: "ws-message", message }),
      onClose: () => {
        dispatch({ kind: "ws-closed" });
        if (!state.authFailed) {
          setTimeout(connect, backoffMs);
          backoffMs = Math.min(backoffMs * 2, 10_000);
        }
      },
    }, WebSocket as unknown as SocketCtor);
    socket.connect();
  };

  app.addEventListener("click", (e) => {
    const el = (e.target as HTMLElement).closest("[data-ev]");
    if (el === null) return;
    dispatch(JSON.parse(el.getAttribute("data-ev")!) as ConsoleEvent);
  });

  app.addEventListener("change", (e) => {
    const el = e.target as HTMLInputElement;
    if (el.dataset.setting) {
      dispatch({
        kind: "ui-toggle",
        field: el.dataset.setting as "service_enabled" | "do_not_disturb",
      });
    } else if (el.dataset.channel) {
      dispatch({ kind: "ui-channel", channel: el.dataset.channel, enabled: el.checked });
    }
  });

  // Image loads fail silently otherwise; capture phase because error
  // events do not bubble.
  app.addEventListener("error", (e) => {
    const t = e.target as HTMLElement;
    if (t.tagName === "IMG" && t.dataset.entry) {
      dispatch({ kind: "image-missing", entryId: Number(t.dataset.entry) });
    }
  }, true);

  window.setInterval(() => dispatch({ kind: "tick", nowMs: Date.now() }), 1000);

  connect();
  repaint();
}

function main(): void {
  const form = document.getElementById("connect") as HTMLFormElement;
  const field = (id: string) => document.getElementById(id) as HTMLInputElement;
  const saved = savedConfig();
  if (saved.host) field("cfg-host").value = saved.host;
  if (saved.bridgePort) field("cfg-bridge").value = String(saved.bridgePort);
  if (saved.httpPort) field("cfg-http").value = String(saved.httpPort);
  if (saved.token) field("cfg-token").value = saved.token;

  form.addEventListener("submit", (e) => {
    e.preventDefault();
    const cfg: ConnectConfig = {
      host: field("cfg-host").value.trim() || "127.0.0.1",
      bridgePort: Number(field("cfg-bridge").value) || 7003,
      httpPort: Number(field("cfg-http").value) || 7080,
      token: field("cfg-token").value.trim(),
    };
    localStorage.setItem(STORAGE_KEY, JSON.stringify(cfg));
    form.hidden = true;
    document.getElementById("app")!.hidden = false;
    boot(cfg);
  });
}

main();
