// Word tokenization for the object-tagging view: the user clicks words of
// the context prompt; runs of adjacent selected words merge into one object
// span ("wooden" + "bench" -> "wooden bench" under a single identifier).

export interface WordToken {
  index: number;
  start: number;
  end: number;
  word: string;
}

const WORD_RE = /\S+/g;

export function tokenizeWords(context: string): WordToken[] {
  const tokens: WordToken[] = [];
  let match;
  let index = 0;
  while ((match = WORD_RE.exec(context)) !== null) {
    let word = match[0];
    let start = match.index;
    // trailing punctuation is not part of the object word
    const trimmed = word.replace(/[.,;:!?]+$/, "");
    if (trimmed.length === 0) continue;
    word = trimmed;
    tokens.push({ index, start, end: start + word.length, word });
    index += 1;
  }
  return tokens;
}

export function spansFromSelection(
  tokens: WordToken[],
  selected: Set<number>,
): [number, number][] {
  const spans: [number, number][] = [];
  let current: [number, number] | null = null;
  let prevIndex = -2;
  for (const token of tokens) {
    if (!selected.has(token.index)) continue;
    if (current !== null && token.index === prevIndex + 1) {
      current[1] = token.end;
    } else {
      current = [token.start, token.end];
      spans.push(current);
    }
    prevIndex = token.index;
  }
  return spans;
}

export function objectWords(context: string, spans: [number, number][]): string[] {
  return spans.map(([start, end]) => context.slice(start, end));
}

export function toggleWord(selected: Set<number>, index: number): Set<number> {
  const next = new Set(selected);
  if (next.has(index)) next.delete(index);
  else next.add(index);
  return next;
}
