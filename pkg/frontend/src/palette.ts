/** Fixed 8-color overlay palette, cycling by slot index so colors stay
 * stable across turns within a session. */

export interface SlotColor {
  r: number;
  g: number;
  b: number;
  name: string;
}

export const PALETTE: readonly SlotColor[] = [
  { r: 251, g: 146, b: 60, name: 'orange' },
  { r: 59, g: 130, b: 246, name: 'blue' },
  { r: 34, g: 197, b: 94, name: 'green' },
  { r: 168, g: 85, b: 247, name: 'purple' },
  { r: 236, g: 72, b: 153, name: 'pink' },
  { r: 6, g: 182, b: 212, name: 'cyan' },
  { r: 245, g: 158, b: 11, name: 'amber' },
  { r: 99, g: 102, b: 241, name: 'indigo' },
];

export function colorForSlot(slotIndex: number): SlotColor {
  return PALETTE[((slotIndex % PALETTE.length) + PALETTE.length) % PALETTE.length];
}

export function cssColor(color: SlotColor, alpha = 1): string {
  return `rgba(${color.r}, ${color.g}, ${color.b}, ${alpha})`;
}
