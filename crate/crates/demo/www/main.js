import init, { clean, segment, metrics } from "./pkg/mtltext_demo.js";

const LEXICON = `the	23135851162
and	12997637966
them	1090354840
back	1188000000
build	397310512
wall	143523440
send	347421234
women	187654321
suck	6543210
at	2272272772
every	481411832
thing	243128640
everything	211289700
ban	19283746
islam	8456123
kill	50321456
`;

const EMOTICONS = `😡	anger
😠	anger
😍	love
😢	sad
😂	happy
😱	shocking
`;

const $ = (id) => document.getElementById(id);

function el(tag, attrs = {}, text = "") {
  const e = document.createElement(tag);
  Object.assign(e, attrs);
  if (text) e.textContent = text;
  return e;
}

function show(out, fn) {
  out.replaceChildren();
  try {
    fn(out);
  } catch (e) {
    out.append(el("p", { className: "err" }, String(e.message ?? e)));
  }
}

const pct = (x) => (100 * x).toFixed(2);

function runClean() {
  show($("clean-out"), (out) => {
    const r = JSON.parse(clean($("post").value, $("lexicon").value, $("emoticons").value));
    const line = el("p");
    for (const t of r.tokens) {
      line.append(el("span", { className: `tok ${t.provenance}`, title: t.provenance }, t.text));
    }
    out.append(line);
    out.append(el("p", {}, `${r.tokens.length} tokens; emoticons mapped ${r.emoticons_substituted}, dropped ${r.emoticons_dropped}`));
  });
}

function runSegment() {
  show($("segment-out"), (out) => {
    const r = JSON.parse(segment($("tag").value, $("lexicon").value));
    const table = el("table");
    table.append(row(["word", "ln P", "in lexicon"], "th"));
    for (const w of r.words) table.append(row([w.word, w.log_prob.toFixed(3), w.known ? "yes" : "no"]));
    table.append(row(["total", r.score.toFixed(3), ""], "th"));
    out.append(table);
  });
}

function row(cells, kind = "td") {
  const tr = el("tr");
  for (const c of cells) tr.append(el(kind, {}, String(c)));
  return tr;
}

function runMetrics() {
  show($("metrics-out"), (out) => {
    const r = JSON.parse(metrics($("labels").value, $("grid").value));
    out.append(el("pre", {}, r.grid));
    out.append(el("p", {}, `accuracy ${pct(r.accuracy)}  macro-F ${pct(r.macro_f1)}  weighted-F ${pct(r.weighted_f1)}`));
    const table = el("table");
    table.append(row(["class", "precision", "recall", "F1", "support"], "th"));
    for (const c of r.classes) table.append(row([c.label, pct(c.precision), pct(c.recall), pct(c.f1), c.support]));
    out.append(table);
    if (r.zero_division.length) out.append(el("p", {}, `zero division scored as 0: ${r.zero_division.join(", ")}`));
  });
}

await init();
$("lexicon").value = LEXICON;
$("emoticons").value = EMOTICONS;
$("clean").onclick = runClean;
$("segment").onclick = runSegment;
$("metrics").onclick = runMetrics;
runClean();
runSegment();
runMetrics();
