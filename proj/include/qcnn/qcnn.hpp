#pragma once

#include "qcnn/bytes.hpp"
#include "qcnn/codec.hpp"
#include "qcnn/descriptor.hpp"
#include "qcnn/engine.hpp"
#include "qcnn/error.hpp"
#include "qcnn/network.hpp"
#include "qcnn/parallel.hpp"
#include "qcnn/quantizer.hpp"
#include "qcnn/retrieval.hpp"
#include "qcnn/synthetic.hpp"
#include "qcnn/tensor.hpp"
#include "qcnn/trainer.hpp"
