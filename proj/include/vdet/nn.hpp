#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "vdet/tensor.hpp"

namespace vdet::nn {

enum class Mode { kTrain, kEval };

/// Trainable array with its gradient accumulator.
struct Param {
  std::string name;
  std::vector<int> dims;
  std::vector<float> value;
  std::vector<float> grad;
  bool decay = true;
};

/// Non-trainable state saved with the weights (batch-norm running statistics).
struct Buffer {
  std::string name;
  std::vector<int> dims;
  std::vector<float> value;
};

class Op;

/// A feed-forward DAG of tensor ops with reverse-mode gradients.
///
/// Nodes are appended in topological order; every builder method returns the
/// new node's id. `forward` evaluates all nodes, `backward` propagates output
/// gradients into the parameter accumulators (which are summed, not reset).
class Network {
 public:
  Network();
  ~Network();
  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;

  int input(int channels);
  int conv(int in, int out_channels, int kernel, int stride, bool bias, const std::string& name);
  int batch_norm(int in, const std::string& name);
  int relu(int in);
  /// Padding defaults to kernel/2 for stride 1 and 0 otherwise.
  int max_pool(int in, int kernel, int stride, int pad = -1);
  int upsample(int in, int factor = 2, bool bilinear = false);
  int concat(const std::vector<int>& ins);
  int add(int a, int b);

  void set_outputs(std::vector<int> outputs);
  const std::vector<int>& outputs() const { return outputs_; }

  int channels(int node) const;
  /// Cumulative spatial downsampling factor of a node relative to the input.
  int stride(int node) const;
  int num_nodes() const { return static_cast<int>(nodes_.size()); }

  /// Evaluates the graph. In eval mode intermediate activations are freed as
  /// soon as their last consumer has run.
  std::vector<Tensor> forward(const Tensor& input, Mode mode);

  /// Back-propagates gradients of the outputs (same order as `outputs()`).
  /// Requires a preceding forward in train mode.
  void backward(const std::vector<Tensor>& output_grads);

  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  std::vector<Buffer*> buffers();
  std::vector<const Buffer*> buffers() const;
  std::size_t parameter_count() const;
  void zero_grad();

  /// Batch-norm statistics in train mode are computed over consecutive groups
  /// of this many samples (1 means per-sample statistics).
  void set_bn_group(int group);
  int bn_group() const { return bn_group_; }

  void initialize(std::uint64_t seed);

 private:
  struct Node;
  int push(std::unique_ptr<Op> op, std::vector<int> inputs, int channels, int stride);

  std::vector<std::unique_ptr<Node>> nodes_;
  std::vector<int> outputs_;
  int bn_group_ = 1;
};

}  // namespace vdet::nn
