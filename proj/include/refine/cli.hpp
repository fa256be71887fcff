#pragma once

#include <string>
#include <vector>

#include "refine/camera.hpp"
#include "refine/refine_loop.hpp"

namespace refine::cli {

// Entry point shared by the binary and the test harness. argv-style tokens,
// without the program name. Returns the process exit code: 0 success,
// 1 usage/missing input, 2 partial batch failure.
int run(const std::vector<std::string>& args);

// camera file: {azimuth, elevation, distance, fov_y} or
// {extrinsic: [16 floats row-major], fov_y}, plus optional image_size [W,H]
CameraPose load_camera_json(const std::string& path);

// config file merged over defaults; flags are applied on top by run()
RefineConfig<float> load_config_json(const std::string& path, std::string* normalize_mode = nullptr);

// ablation preset names -> loss weight configurations
std::vector<std::string> ablation_preset_names();
LossWeights<float> ablation_preset(const std::string& name);

}  // namespace refine::cli
