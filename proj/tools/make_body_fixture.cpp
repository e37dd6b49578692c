// Regenerates fixtures/toy_body.safetensors from the procedural humanoid.
#include <iostream>

#include "ihk/bodyfit/body_model.hpp"

int main(int argc, char** argv) {
  const auto path = argc > 1 ? std::filesystem::path(argv[1]) : ihk::bodyfit::default_body_fixture_path();
  const auto model = ihk::bodyfit::make_toy_body_model();
  ihk::bodyfit::save_body_model(path, model);
  std::cout << "wrote " << path << ": V=" << model.num_vertices() << " F=" << model.faces.size(0)
            << " J=" << model.num_joints() << " K=" << model.num_keypoints() << " S=" << model.num_shape() << "\n";
  return 0;
}
