/**
 * Fixed-point second arithmetic for boundary nudging.
 *
 * Timestamps are held as integer centiseconds so that repeated +-1.0 s and
 * +-0.1 s nudges are exact: two +1.0 s nudges on "105.83" give "107.83",
 * never a float-drifted "107.82999...".
 */

/** Parse a decimal seconds string (or number) into integer centiseconds. */
export function toCentis(value: string | number): number {
  const text = typeof value === "number" ? value.toFixed(2) : value.trim();
  const m = /^(-?)(\d+)(?:\.(\d+))?$/.exec(text);
  if (!m) {
    throw new Error(`not a decimal seconds value: ${value}`);
  }
  const sign = m[1] === "-" ? -1 : 1;
  const frac = ((m[3] ?? "") + "00").slice(0, 2);
  return sign * (parseInt(m[2], 10) * 100 + parseInt(frac, 10));
}

/** Render centiseconds as a seconds string with exactly two decimals. */
export function fromCentis(centis: number): string {
  const sign = centis < 0 ? "-" : "";
  const abs = Math.abs(centis);
  const whole = Math.floor(abs / 100);
  const frac = (abs % 100).toString().padStart(2, "0");
  return `${sign}${whole}.${frac}`;
}

/** Nudge a seconds string by a step in tenths of a second (exact). */
export function nudge(seconds: string, tenths: number): string {
  return fromCentis(toCentis(seconds) + tenths * 10);
}

/** Numeric value for posting to the server; parses the exact decimal. */
export function toNumber(seconds: string): number {
  return parseFloat(seconds);
}
