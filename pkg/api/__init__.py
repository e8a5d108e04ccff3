# API package for the WiFlow inference service
