#include "icl/taskgen.hpp"

#include "icl/errors.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

namespace icl {

namespace {

Matrix draw_inputs(SeedStream& stream, const OodSpec& ood, DistKind alt, Index rows, Index cols) {
  switch (ood.mode) {
    case OodMode::input_range:
      if (!(ood.alpha > 0.0)) throw ConfigError("input_range mode needs alpha > 0");
      return sample(stream, Distribution::uniform(-ood.alpha, ood.alpha), rows, cols);
    case OodMode::teacher_scale:
      return sample(stream, Distribution::uniform(-1.0, 1.0), rows, cols);
    case OodMode::alt_dist_scale:
      return ood.alpha * sample(stream, Distribution{alt, 0.0, 1.0}, rows, cols);
  }
  throw ConfigError("unknown OOD mode");
}

}  // namespace

Task sample_linear_task(SeedStream& stream, Index n, Index nx, Index ny, const OodSpec& ood) {
  if (n < 1 || nx < 1 || ny < 1) throw ConfigError("task dimensions must be >= 1");
  if (ood.alpha < 0.0) throw ConfigError("OOD alpha must be non-negative");
  Task task;
  task.kind = TaskKind::linear;
  Matrix teacher = sample(stream, Distribution::standard_normal(), ny, nx);
  if (ood.mode == OodMode::teacher_scale) teacher *= ood.alpha;

  DistKind alt = DistKind::normal;
  if (ood.mode == OodMode::alt_dist_scale) {
    if (ood.alt_dist) {
      alt = *ood.alt_dist;
    } else {
      static constexpr DistKind choices[] = {DistKind::normal, DistKind::exponential,
                                             DistKind::laplace};
      alt = choices[stream.next_u64() % 3];
    }
  }
  Matrix all = draw_inputs(stream, ood, alt, nx, n + 1);
  task.inputs = all.leftCols(n);
  task.query_input = all.col(n);
  task.targets = teacher * task.inputs;
  task.query_target = teacher * task.query_input;
  task.teacher = std::move(teacher);
  return task;
}

Task make_sine_task(double amplitude, double phase, const Vector& xs, double query_x) {
  Task task;
  task.kind = TaskKind::sine;
  task.inputs = xs.transpose();
  task.targets = (amplitude * (xs.array() + phase).sin()).matrix().transpose();
  task.query_input = Vector::Constant(1, query_x);
  task.query_target = Vector::Constant(1, amplitude * std::sin(phase + query_x));
  return task;
}

Task sample_sine_task(SeedStream& stream, Index n) {
  if (n < 1) throw ConfigError("sine task needs n >= 1");
  const double amplitude = stream.uniform(0.1, 5.0);
  const double phase = stream.uniform(0.0, std::numbers::pi);
  Vector xs(n);
  for (Index i = 0; i < n; ++i) xs(i) = stream.uniform(-5.0, 5.0);
  const double xq = stream.uniform(-5.0, 5.0);
  return make_sine_task(amplitude, phase, xs, xq);
}

std::vector<Task> sample_tasks(const SeedStream& stream, const TaskSpec& spec, Index count) {
  std::vector<Task> tasks;
  tasks.reserve(static_cast<std::size_t>(count));
  for (Index k = 0; k < count; ++k) {
    SeedStream child = stream.split(static_cast<std::uint64_t>(k));
    if (spec.kind == TaskKind::sine)
      tasks.push_back(sample_sine_task(child, spec.n));
    else
      tasks.push_back(sample_linear_task(child, spec.n, spec.nx, spec.ny, spec.ood));
  }
  return tasks;
}

TokenSeq build_tokens_concat(const Task& task) {
  const Index n = task.n(), nx = task.nx(), ny = task.ny();
  if (n < 1 || task.query_input.size() != nx) throw ShapeError("task needs context and query");
  TokenSeq seq;
  seq.layout = Layout::concat;
  seq.nx = nx;
  seq.ny = ny;
  seq.query_index = n;
  seq.tokens = Matrix::Zero(nx + ny, n + 1);
  seq.tokens.topLeftCorner(nx, n) = task.inputs;
  seq.tokens.bottomLeftCorner(ny, n) = task.targets;
  seq.tokens.col(n).head(nx) = task.query_input;
  return seq;
}

Matrix sinusoidal_encoding(Index dim, Index length) {
  Matrix pe(dim, length);
  for (Index pos = 0; pos < length; ++pos) {
    for (Index i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      pe(i, pos) = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  }
  return pe;
}

TokenSeq build_tokens_alternating(const Task& task, Index pos_enc_dim, PosEncoding encoding) {
  const Index n = task.n(), nx = task.nx(), ny = task.ny();
  if (n < 1 || task.query_input.size() != nx) throw ShapeError("task needs context and query");
  const Index length = 2 * n + 1;
  if (pos_enc_dim < 1) throw ConfigError("alternating layout needs pos_enc_dim >= 1");
  if (encoding == PosEncoding::unit && pos_enc_dim < length)
    throw ConfigError("unit positional encodings need pos_enc_dim >= 2N+1");
  if (encoding == PosEncoding::none) throw ConfigError("alternating layout needs positional encodings");

  TokenSeq seq;
  seq.layout = Layout::alternating;
  seq.nx = nx;
  seq.ny = ny;
  seq.pos_enc_dim = pos_enc_dim;
  seq.query_index = length - 1;
  seq.tokens = Matrix::Zero(nx + ny + pos_enc_dim, length);
  for (Index j = 0; j < n; ++j) {
    seq.tokens.col(2 * j).head(nx) = task.inputs.col(j);
    seq.tokens.col(2 * j + 1).segment(nx, ny) = task.targets.col(j);
  }
  seq.tokens.col(length - 1).head(nx) = task.query_input;
  if (encoding == PosEncoding::unit) {
    for (Index t = 0; t < length; ++t) seq.tokens(nx + ny + t, t) = 1.0;
  } else {
    seq.tokens.bottomRows(pos_enc_dim) = sinusoidal_encoding(pos_enc_dim, length);
  }
  return seq;
}

Task strip_tokens(const TokenSeq& seq) {
  Task task;
  const Index nx = seq.nx, ny = seq.ny;
  if (seq.layout == Layout::concat) {
    const Index n = seq.length() - 1;
    task.inputs = seq.tokens.topLeftCorner(nx, n);
    task.targets = seq.tokens.block(nx, 0, ny, n);
    task.query_input = seq.tokens.col(n).head(nx);
  } else {
    const Index n = (seq.length() - 1) / 2;
    task.inputs.resize(nx, n);
    task.targets.resize(ny, n);
    for (Index j = 0; j < n; ++j) {
      task.inputs.col(j) = seq.tokens.col(2 * j).head(nx);
      task.targets.col(j) = seq.tokens.col(2 * j + 1).segment(nx, ny);
    }
    task.query_input = seq.tokens.col(seq.length() - 1).head(nx);
  }
  return task;
}

TokenSeq build_tokens(const Task& task, const LayoutSpec& spec) {
  if (spec.layout == Layout::concat) return build_tokens_concat(task);
  return build_tokens_alternating(task, spec.pos_enc_dim, spec.encoding);
}

TokenBatch build_batch(const std::vector<TokenSeq>& seqs) {
  if (seqs.empty()) throw ShapeError("empty batch");
  const TokenSeq& first = seqs.front();
  TokenBatch batch;
  batch.batch = static_cast<Index>(seqs.size());
  batch.length = first.length();
  batch.query_index = first.query_index;
  batch.nx = first.nx;
  batch.ny = first.ny;
  batch.tokens.resize(first.dim(), batch.batch * batch.length);
  for (Index b = 0; b < batch.batch; ++b) {
    const TokenSeq& s = seqs[static_cast<std::size_t>(b)];
    if (s.dim() != first.dim() || s.length() != first.length() || s.query_index != first.query_index)
      throw ShapeError("batch sequences differ in shape");
    batch.tokens.middleCols(b * batch.length, batch.length) = s.tokens;
  }
  return batch;
}

TokenBatch build_batch(const std::vector<Task>& tasks, const LayoutSpec& spec) {
  std::vector<TokenSeq> seqs;
  seqs.reserve(tasks.size());
  for (const Task& t : tasks) seqs.push_back(build_tokens(t, spec));
  TokenBatch batch = build_batch(seqs);
  batch.targets.resize(batch.ny, batch.batch);
  for (Index b = 0; b < batch.batch; ++b) {
    const Task& t = tasks[static_cast<std::size_t>(b)];
    if (t.query_target.size() != batch.ny) throw ShapeError("task without query target");
    batch.targets.col(b) = t.query_target;
  }
  return batch;
}

std::string to_string(Layout layout) { return layout == Layout::concat ? "concat" : "alternating"; }

Layout layout_from_string(const std::string& s) {
  if (s == "concat") return Layout::concat;
  if (s == "alternating") return Layout::alternating;
  throw ConfigError("unknown layout '" + s + "'");
}

std::string to_string(PosEncoding pe) {
  switch (pe) {
    case PosEncoding::none: return "none";
    case PosEncoding::sinusoidal: return "sinusoidal";
    case PosEncoding::unit: return "unit";
  }
  return "none";
}

PosEncoding pos_encoding_from_string(const std::string& s) {
  if (s == "none") return PosEncoding::none;
  if (s == "sinusoidal") return PosEncoding::sinusoidal;
  if (s == "unit") return PosEncoding::unit;
  throw ConfigError("unknown positional encoding '" + s + "'");
}

std::string to_string(TaskKind kind) { return kind == TaskKind::linear ? "linear" : "sine"; }

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "linear") return TaskKind::linear;
  if (s == "sine") return TaskKind::sine;
  throw ConfigError("unknown task kind '" + s + "'");
}

std::string to_string(OodMode mode) {
  switch (mode) {
    case OodMode::input_range: return "input_range";
    case OodMode::teacher_scale: return "teacher_scale";
    case OodMode::alt_dist_scale: return "alt_dist_scale";
  }
  return "input_range";
}

OodMode ood_mode_from_string(const std::string& s) {
  if (s == "input_range") return OodMode::input_range;
  if (s == "teacher_scale") return OodMode::teacher_scale;
  if (s == "alt_dist_scale") return OodMode::alt_dist_scale;
  throw ConfigError("unknown OOD mode '" + s + "'");
}

void export_task_csv(const std::string& path, const Task& task) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  for (Index i = 0; i < task.nx(); ++i) out << "x_" << (i + 1) << ',';
  for (Index i = 0; i < task.ny(); ++i) out << "y_" << (i + 1) << ',';
  out << "role\n";
  for (Index j = 0; j < task.n(); ++j) {
    for (Index i = 0; i < task.nx(); ++i) out << format_double(task.inputs(i, j)) << ',';
    for (Index i = 0; i < task.ny(); ++i) out << format_double(task.targets(i, j)) << ',';
    out << "context\n";
  }
  for (Index i = 0; i < task.nx(); ++i) out << format_double(task.query_input(i)) << ',';
  for (Index i = 0; i < task.ny(); ++i)
    out << (task.query_target.size() == task.ny() ? format_double(task.query_target(i)) : "") << ',';
  out << "query\n";
}

}  // namespace icl
