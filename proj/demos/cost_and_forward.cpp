// Builds Octave-YOLO-N next to YOLOv8-N, prints the cost comparison, then
// runs one forward pass and lists the detection maps.

#include <iostream>

#include "octyolo/analysis.hpp"

int main() {
  using namespace octyolo;
  const int res = 256;
  const auto base = build_yolov8(scale_n(), res);
  const auto ours = build_octave_yolo(scale_n(), {true, true, true}, res);

  const auto rb = count_costs(base);
  const auto ro = compare(count_costs(ours), rb);
  std::cout << emit_report({rb, ro}, ReportFormat::markdown) << "\n";

  Network<float> net(ours, /*seed=*/1);
  Rng rng(2);
  const auto x = Tensor<float>::uniform(Shape{1, 3, res, res}, rng);
  for (const auto& y : net.forward(x)) std::cout << "detect map " << y.shape().str() << "\n";
  return 0;
}
