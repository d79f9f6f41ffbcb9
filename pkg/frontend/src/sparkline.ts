// Tiny SVG sparkline for the per-step in-box attention mass series.

export function sparklinePath(
  series: number[],
  width: number,
  height: number,
  pad = 2,
): string {
  if (series.length === 0) {
    return '';
  }
  if (series.length === 1) {
    const y = height - pad - series[0] * (height - 2 * pad);
    return `M${pad},${y.toFixed(2)} L${(width - pad).toFixed(2)},${y.toFixed(2)}`;
  }
  const stepX = (width - 2 * pad) / (series.length - 1);
  return series
    .map((v, i) => {
      const x = pad + i * stepX;
      const clamped = Math.min(1, Math.max(0, v));
      const y = height - pad - clamped * (height - 2 * pad);
      return `${i === 0 ? 'M' : 'L'}${x.toFixed(2)},${y.toFixed(2)}`;
    })
    .join(' ');
}

export function sparklineSvg(
  series: number[],
  options: { width?: number; height?: number; color?: string; label?: string } = {},
): SVGSVGElement {
  const width = options.width ?? 120;
  const height = options.height ?? 24;
  const svg = document.createElementNS('http://www.w3.org/2000/svg', 'svg');
  svg.setAttribute('width', String(width));
  svg.setAttribute('height', String(height));
  svg.setAttribute('viewBox', `0 0 ${width} ${height}`);
  svg.classList.add('sparkline');
  if (options.label) {
    svg.setAttribute('aria-label', options.label);
  }
  const path = document.createElementNS('http://www.w3.org/2000/svg', 'path');
  path.setAttribute('d', sparklinePath(series, width, height));
  path.setAttribute('fill', 'none');
  path.setAttribute('stroke', options.color ?? '#29a19c');
  path.setAttribute('stroke-width', '1.5');
  svg.appendChild(path);
  return svg;
}
