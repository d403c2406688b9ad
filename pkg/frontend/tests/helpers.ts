// Recording/faking transport for unit tests: every request the client makes
// is captured, and responses come from a route table.

import { Transport } from "../src/api.js";

export interface RecordedRequest {
  url: string;
  method: string;
  body?: unknown;
}

export type RouteTable = Record<
  string,
  (req: RecordedRequest) => Response | Promise<Response>
>;

export function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

export function pngResponse(bytes: Uint8Array): Response {
  return new Response(new Uint8Array(bytes), {
    status: 200,
    headers: { "content-type": "image/png" },
  });
}

export function sseResponse(frames: unknown[]): Response {
  const text = frames.map((f) => `data: ${JSON.stringify(f)}\n\n`).join("");
  return new Response(text, {
    status: 200,
    headers: { "content-type": "text/event-stream" },
  });
}

export class RecordingTransport {
  requests: RecordedRequest[] = [];

  constructor(private routes: RouteTable) {}

  transport: Transport = async (url, init) => {
    const method = init?.method ?? "GET";
    let body: unknown;
    if (typeof init?.body === "string") body = JSON.parse(init.body);
    else if (init?.body instanceof FormData) {
      const entries: Record<string, unknown> = {};
      init.body.forEach((value, key) => (entries[key] = value));
      body = entries;
    }
    const request = { url, method, body };
    this.requests.push(request);
    const path = new URL(url).pathname;
    for (const [pattern, handler] of Object.entries(this.routes)) {
      if (new RegExp(`^${pattern}$`).test(path)) return handler(request);
    }
    return jsonResponse({ detail: `no route for ${path}` }, 404);
  };

  urls(): string[] {
    return this.requests.map((r) => new URL(r.url).pathname);
  }
}
