// Live metrics panel fed by /api/v1/metrics polling.

import { MetricsSnapshot } from './api.js';

const METRIC_ORDER = ['efficiency', 'ac', 'hcac', 'hvac', 'fn', 'hcfn'] as const;

export function formatMetric(value: number | null): string {
  return value === null ? 'n/a' : String(value);
}

export function renderDashboard(container: HTMLElement, snapshot: MetricsSnapshot): void {
  container.replaceChildren();
  const table = document.createElement('table');
  table.className = 'metrics';
  for (const name of METRIC_ORDER) {
    const row = document.createElement('tr');
    const key = document.createElement('td');
    key.textContent = name;
    const value = document.createElement('td');
    value.dataset.metric = name;
    value.textContent = formatMetric(snapshot.metrics[name]);
    row.append(key, value);
    table.appendChild(row);
  }
  for (const [name, value] of [
    ['queue_depth', snapshot.queue_depth],
    ['disagreement_rate', snapshot.disagreement_rate],
  ] as const) {
    const row = document.createElement('tr');
    const key = document.createElement('td');
    key.textContent = name;
    const cell = document.createElement('td');
    cell.dataset.metric = name;
    cell.textContent = String(value);
    row.append(key, cell);
    table.appendChild(row);
  }
  container.appendChild(table);
}

export function renderStaleBanner(container: HTMLElement, stale: boolean): void {
  let banner = container.querySelector<HTMLElement>('.stale-banner');
  if (!stale) {
    banner?.remove();
    return;
  }
  if (!banner) {
    banner = document.createElement('div');
    banner.className = 'stale-banner';
    banner.textContent = 'Server unreachable; showing stale data.';
    container.prepend(banner);
  }
}
